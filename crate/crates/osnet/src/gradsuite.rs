//! Finite-difference suites behind `osnet gradcheck`.
//!
//! Operator checks use tolerance [`OP_TOL`]; composite checks (a full block,
//! a small network, supernet logits) use [`NET_TOL`].

use std::cell::RefCell;

use osnet_core::gradcheck::{check_inputs, check_params, GradCheckReport};
use osnet_core::nas::{sample_all, supernet_forward};
use osnet_core::nn::block::shared_gate_gradient_check;
use osnet_core::nn::{build_model, build_supernet, BlockProbe, CandidateKind, Ctx, Model, ModelSpec, OsBlock, OsBlockSpec, Selection};
use osnet_core::rng::{derive, SeededRng};
use osnet_core::tape::{Mode, Tape, Var};
use osnet_core::{ParamStore, Result, RunningStats, Tensor};

use crate::config::Scope;

pub const OP_TOL: f64 = 1e-4;
pub const NET_TOL: f64 = 1e-3;

struct Inputs {
    rng: SeededRng,
}

impl Inputs {
    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }
}

/// `Σ y ⊙ w` with a fixed random `w`.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Random weights for probing an output of the given shape.
fn weights(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut derive(seed, 0x5eed))
}

pub fn ops(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut g = Inputs { rng: derive(seed, 1) };
    let mut out = Vec::new();
    let w = |shape: &[usize], k: u64| weights(shape, seed ^ k);

    let (x, k) = (g.randn(&[1, 2, 4, 4]), g.randn(&[3, 2, 3, 3]));
    let pw = w(&[1, 3, 4, 4], 1);
    out.push(check_inputs("conv2d", &[x, k], OP_TOL, |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1)?;
        probe(t, y, &pw)
    })?);
    let (x, k) = (g.randn(&[2, 2, 7, 6]), g.randn(&[3, 2, 3, 3]));
    let pw = w(&[2, 3, 4, 3], 2);
    out.push(check_inputs("conv2d stride 2", &[x, k], OP_TOL, |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        probe(t, y, &pw)
    })?);
    let (x, k) = (g.randn(&[2, 3, 5, 4]), g.randn(&[3, 1, 3, 3]));
    let pw = w(&[2, 3, 5, 4], 3);
    out.push(check_inputs("depthwise_conv2d", &[x, k], OP_TOL, |t, v| {
        let y = t.depthwise_conv2d(v[0], v[1], 1)?;
        probe(t, y, &pw)
    })?);
    let (x, k) = (g.randn(&[2, 3, 3, 4]), g.randn(&[5, 3, 1, 1]));
    let pw = w(&[2, 5, 3, 4], 4);
    out.push(check_inputs("pointwise_conv2d", &[x, k], OP_TOL, |t, v| {
        let y = t.pointwise_conv2d(v[0], v[1])?;
        probe(t, y, &pw)
    })?);

    let inputs = [g.randn(&[2, 3, 3, 2]), g.randn(&[2, 3, 1, 1]), g.randn(&[2, 3, 3, 2])];
    let pw = w(&[2, 3, 3, 2], 5);
    out.push(check_inputs("add/mul broadcast", &inputs, OP_TOL, |t, v| {
        let a = t.mul(v[0], v[1])?;
        let b = t.add(v[1], v[2])?;
        let c = t.sub(a, b)?;
        let d = t.mul(c, v[2])?;
        probe(t, d, &pw)
    })?);
    let pw = w(&[4, 3], 6);
    out.push(check_inputs("relu/sigmoid", &[g.randn(&[4, 3])], OP_TOL, |t, v| {
        let a = t.relu(v[0])?;
        let b = t.sigmoid(v[0])?;
        let c = t.add(a, b)?;
        probe(t, c, &pw)
    })?);

    let pw = w(&[2, 2, 4, 3], 7);
    out.push(check_inputs("max_pool 3/2", &[g.randn(&[2, 2, 7, 6])], OP_TOL, |t, v| {
        let y = t.max_pool(v[0], 3, 2, 1)?;
        probe(t, y, &pw)
    })?);
    let (pa, pg) = (w(&[2, 2, 3, 2], 8), w(&[2, 2, 1, 1], 9));
    out.push(check_inputs("avg_pool/global_avg_pool", &[g.randn(&[2, 2, 6, 4])], OP_TOL, |t, v| {
        let y = t.avg_pool(v[0], 2, 2)?;
        let p = t.global_avg_pool(v[0])?;
        let a = probe(t, y, &pa)?;
        let b = probe(t, p, &pg)?;
        t.add(a, b)
    })?);

    let inputs = [g.randn(&[3, 4]), g.randn(&[5, 4]), g.randn(&[5])];
    let pw = w(&[3, 5], 10);
    out.push(check_inputs("linear/softmax", &inputs, OP_TOL, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let s = t.softmax(y)?;
        probe(t, s, &pw)
    })?);
    let inputs = [g.randn(&[2, 3]), g.randn(&[2, 3]), g.randn(&[2, 3]), g.randn(&[3])];
    let pw = w(&[2, 3], 11);
    out.push(check_inputs("weighted_sum", &inputs, OP_TOL, |t, v| {
        let y = t.weighted_sum(&v[..3], v[3])?;
        probe(t, y, &pw)
    })?);

    let inputs = [g.randn(&[3, 2, 3, 3]), g.randn(&[2]), g.randn(&[2])];
    let pw = w(&[3, 2, 3, 3], 12);
    out.push(check_inputs("batch_norm train", &inputs, OP_TOL, |t, v| {
        let mut stats = RunningStats::new("bn".into(), 2);
        let y = t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)?;
        probe(t, y, &pw)
    })?);
    out.push(check_inputs("batch_norm eval", &inputs, OP_TOL, |t, v| {
        let mut stats = RunningStats::new("bn".into(), 2);
        stats.mean = vec![0.3, -0.2];
        stats.var = vec![1.5, 0.7];
        let y = t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval)?;
        probe(t, y, &pw)
    })?);
    out.push(check_inputs("instance_norm", &inputs, OP_TOL, |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2])?;
        probe(t, y, &pw)
    })?);
    out.push(check_inputs("label_smoothed_ce", &[g.randn(&[4, 5])], OP_TOL, |t, v| {
        t.label_smoothed_ce(v[0], &[0, 3, 4, 1], 0.1)
    })?);
    Ok(out)
}

/// A `T = 4` block of every variant: all parameters, the input, and the
/// shared aggregation gate against its per-stream decomposition.
pub fn block(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let rng = &mut derive(seed, 2);
    for kind in CandidateKind::ALL {
        let spec = OsBlockSpec { mid_channels: 4, gate_reduction: 2, variant: kind, ..OsBlockSpec::new(6, 8) };
        let mut store = ParamStore::new();
        let b = OsBlock::new(&mut store, "block", spec, rng)?;
        let x = Tensor::randn(&[2, 6, 5, 4], 1.0, rng);
        let pw = Tensor::randn(&[2, 8, 5, 4], 1.0, rng);
        let ids: Vec<_> = store.ids().collect();
        out.push(check_params(&format!("block {} params", kind.name()), &mut store, &ids, 6, NET_TOL, |tape, store| {
            let xv = tape.constant(x.clone());
            let mut ctx = Ctx::new(tape, store, Mode::Train);
            let y = b.forward(&mut ctx, xv, Selection::Fixed)?;
            probe(ctx.tape, y, &pw)
        })?);
        let cell = RefCell::new(&mut store);
        out.push(check_inputs(&format!("block {} input", kind.name()), std::slice::from_ref(&x), NET_TOL, |tape, v| {
            let mut store = cell.borrow_mut();
            let mut ctx = Ctx::new(tape, &mut store, Mode::Train);
            let y = b.forward(&mut ctx, v[0], Selection::Fixed)?;
            probe(ctx.tape, y, &pw)
        })?);
        if kind == CandidateKind::Os {
            let r = shared_gate_gradient_check(&b, &mut store, &x, &pw, BlockProbe::default(), NET_TOL)?;
            out.push(GradCheckReport {
                name: "shared gate assembly".into(),
                checked: r.stream_contributions.len(),
                refined: 0,
                skipped: 0,
                max_rel_err: r.assembly_rel_err,
                tolerance: NET_TOL,
            });
            out.push(GradCheckReport { name: "shared gate parameters".into(), ..r.finite_difference });
        }
    }
    Ok(out)
}

fn tiny_spec(classes: usize) -> ModelSpec {
    ModelSpec {
        width_multiplier: 0.0625,
        streams: 2,
        feature_dim: 16,
        num_classes: classes,
        base_height: 64,
        base_width: 32,
        ..ModelSpec::default()
    }
}

/// Every parameter tensor of a small network under the training loss.
pub fn model(seed: u64) -> Result<Vec<GradCheckReport>> {
    let variants = vec![
        CandidateKind::OsInIn,
        CandidateKind::Os,
        CandidateKind::OsInOut,
        CandidateKind::OsInInOut,
        CandidateKind::Os,
        CandidateKind::OsInIn,
    ];
    let mut m = build_model(&ModelSpec { variants, ..tiny_spec(3) }, seed)?;
    let x = Tensor::rand_uniform(&[4, 3, 64, 32], 0.0, 1.0, &mut derive(seed, 3));
    let labels = [0, 2, 1, 2];
    let ids: Vec<_> = m.store.ids().collect();
    let net = m.net.clone();
    let r = check_params("network parameters", &mut m.store, &ids, 2, NET_TOL, |tape, store| {
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(tape, store, Mode::Train);
        let out = net.forward(&mut ctx, xv, None)?;
        let logits = out.logits.expect("classifier present");
        tape.label_smoothed_ce(logits, &labels, 0.1)
    })?;
    Ok(vec![r])
}

/// Logit gradients of a supernet at fixed Gumbel noise.
pub fn supernet(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut m = build_supernet(&tiny_spec(3), seed)?;
    let rng = &mut derive(seed, 4);
    for id in m.net.arch_logits.clone() {
        m.store.set_value(id, Tensor::randn(&[4], 1.0, rng))?;
    }
    let x = Tensor::rand_uniform(&[3, 3, 64, 32], 0.0, 1.0, rng);
    let labels = [0, 2, 1];
    let temperature = 2.0;
    let draw = sample_all(&m.arch_params(temperature), rng)?;
    let ids = m.net.arch_logits.clone();
    let (spec, net) = (m.spec.clone(), m.net.clone());
    let r = check_params("supernet logits, fixed noise", &mut m.store, &ids, 4, NET_TOL, |tape, store| {
        let mut model = Model { spec: spec.clone(), store: std::mem::take(store), net: net.clone() };
        let loss = supernet_forward(&mut model, tape, &x, &draw, temperature, Mode::Train).and_then(|out| {
            let logits = out.logits.expect("classifier present");
            tape.label_smoothed_ce(logits, &labels, 0.1)
        });
        *store = model.store;
        loss
    })?;
    Ok(vec![r])
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(match scope {
        Scope::Ops => ops(seed)?,
        Scope::Block => block(seed)?,
        Scope::Model => model(seed)?,
        Scope::Supernet => supernet(seed)?,
        Scope::All => [ops(seed)?, block(seed)?, model(seed)?, supernet(seed)?].concat(),
    })
}
