//! Network building blocks and the full omni-scale network.

pub mod accounting;
pub mod actmap;
pub mod block;
pub mod gate;
pub mod layers;
pub mod lite;
pub mod model;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};

pub use block::{BlockProbe, BlockTrace, CandidateKind, GateMode, OsBlock, OsBlockSpec, Selection};
pub use lite::{Lite3x3, Lite3x3Spec};
pub use model::{build_model, build_supernet, Model, ModelSpec, NetOutput};

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        Ctx { tape, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}
