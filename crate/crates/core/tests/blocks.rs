//! Omni-scale blocks, full-network assembly and cost accounting.

use osnet_core::gradcheck::check_params;
use osnet_core::nn::accounting::{count_mult_adds, count_mult_adds_at_resolution, count_params};
use osnet_core::nn::block::shared_gate_gradient_check;
use osnet_core::nn::gate::AggregationGate;
use osnet_core::nn::{build_model, BlockProbe, CandidateKind, Ctx, GateMode, ModelSpec, OsBlock, OsBlockSpec, Selection};
use osnet_core::rng::seeded;
use osnet_core::{Mode, ParamStore, Tape, Tensor};

fn block(spec: OsBlockSpec, seed: u64) -> (OsBlock, ParamStore) {
    let mut store = ParamStore::new();
    let b = OsBlock::new(&mut store, "b", spec, &mut seeded(seed)).unwrap();
    (b, store)
}

fn small(streams: usize) -> OsBlockSpec {
    OsBlockSpec { mid_channels: 4, gate_reduction: 2, streams, ..OsBlockSpec::new(6, 8) }
}

/// Spatial positions of `x` whose gradient is nonzero in any channel when
/// differentiating the sum of stream `t` outputs at `(ci, cj)`.
fn gradient_support(block: &OsBlock, store: &mut ParamStore, x: &Tensor, t: usize, ci: usize, cj: usize) -> Vec<(usize, usize)> {
    let [_, c, h, w] = x.dims4().unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
    let trace = block.forward_traced(&mut ctx, xv, Selection::Fixed, BlockProbe::default()).unwrap();
    let s = trace.streams[t];
    let shape = ctx.tape.shape(s).to_vec();
    let mut mask = Tensor::zeros(&shape);
    for ch in 0..shape[1] {
        mask.data_mut()[(ch * h + ci) * w + cj] = 1.0;
    }
    let m = ctx.tape.constant(mask);
    let picked = ctx.tape.mul(s, m).unwrap();
    let loss = ctx.tape.sum(picked).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(xv).unwrap();
    let mut support = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if (0..c).any(|ch| g[(ch * h + i) * w + j] != 0.0) {
                support.push((i, j));
            }
        }
    }
    support
}

#[test]
fn stream_receptive_field_is_2t_plus_1() {
    let spec = OsBlockSpec { mid_channels: 4, gate_reduction: 2, ..OsBlockSpec::new(8, 8) };
    let (b, mut store) = block(spec, 11);
    // Large BN shifts keep every ReLU in its linear regime, so the support is
    // the full window rather than a subset of it.
    let betas: Vec<_> = store.ids().filter(|&id| store.get(id).name.ends_with(".bn.beta")).collect();
    for id in betas {
        let n = store.get(id).value.len();
        store.set_value(id, Tensor::full(&[n], 50.0)).unwrap();
    }
    let x = Tensor::randn(&[1, 8, 13, 13], 0.1, &mut seeded(12));
    for t in 0..4 {
        let support = gradient_support(&b, &mut store, &x, t, 6, 6);
        let r = t + 1;
        let expect: Vec<(usize, usize)> =
            (6 - r..=6 + r).flat_map(|i| (6 - r..=6 + r).map(move |j| (i, j))).collect();
        assert_eq!(support, expect, "stream {}", t + 1);
    }
}

#[test]
fn gate_values_are_strictly_inside_unit_interval() {
    let (b, mut store) = block(small(4), 13);
    let mut x = Tensor::randn(&[3, 6, 5, 4], 4.0, &mut seeded(14));
    x.data_mut()[0] = 1e3;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
    let trace = b.forward_traced(&mut ctx, xv, Selection::Fixed, BlockProbe::default()).unwrap();
    assert_eq!(trace.gates.len(), 4);
    for g in trace.gates {
        assert_eq!(ctx.tape.shape(g), [3, 4, 1, 1]);
        assert!(ctx.tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn identical_streams_sum_to_t_times_gated_stream() {
    let mut store = ParamStore::new();
    let gate = AggregationGate::new(&mut store, "g", 8, 2, &mut seeded(15));
    let x0 = Tensor::randn(&[2, 8, 4, 3], 1.0, &mut seeded(16));
    for t in 1..=4usize {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let mut acc = None;
        for _ in 0..t {
            let g = gate.forward(&mut ctx, x).unwrap();
            let gx = ctx.tape.mul(x, g).unwrap();
            acc = Some(match acc {
                None => gx,
                Some(a) => ctx.tape.add(a, gx).unwrap(),
            });
        }
        let g = gate.forward(&mut ctx, x).unwrap();
        let gx = ctx.tape.mul(x, g).unwrap();
        let expect = ctx.tape.scale(gx, t as f64).unwrap();
        for (a, e) in ctx.tape.value(acc.unwrap()).data().iter().zip(ctx.tape.value(expect).data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }
}

#[test]
fn single_stream_with_unit_gate_is_the_plain_residual_block() {
    for (ci, co) in [(8, 8), (6, 8)] {
        let spec = OsBlockSpec { streams: 1, mid_channels: 4, gate_reduction: 2, ..OsBlockSpec::new(ci, co) };
        let (b, mut store) = block(spec, 17);
        let x0 = Tensor::randn(&[2, ci, 5, 6], 1.0, &mut seeded(18));
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let probe = BlockProbe { gate: GateMode::Constant(1.0), zero_stream: None };
        let os = b.forward_traced(&mut ctx, x, Selection::Fixed, probe).unwrap().output;
        let base = b.baseline_forward(&mut ctx, x).unwrap();
        let diff = ctx
            .tape
            .value(os)
            .data()
            .iter()
            .zip(ctx.tape.value(base).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "max difference {diff}");
    }
}

#[test]
fn shared_gate_collects_every_stream() {
    let (b, mut store) = block(small(4), 19);
    let x = Tensor::randn(&[2, 6, 5, 4], 1.0, &mut seeded(20));
    let w = Tensor::randn(&[2, 8, 5, 4], 1.0, &mut seeded(21));
    let report = shared_gate_gradient_check(&b, &mut store, &x, &w, BlockProbe::default(), 1e-3).unwrap();
    assert!(report.passed(1e-3), "{report:?}");
    assert_eq!(report.stream_contributions.len(), 4);
    assert!(report.stream_contributions.iter().all(|&c| c > 0.0));

    let zeroed = BlockProbe { zero_stream: Some(2), ..BlockProbe::default() };
    let report = shared_gate_gradient_check(&b, &mut store, &x, &w, zeroed, 1e-3).unwrap();
    assert!(report.passed(1e-3), "{report:?}");
    assert_eq!(report.stream_contributions[2], 0.0);
    assert!(report.stream_contributions[1] > 0.0);
}

#[test]
fn single_stream_shared_and_separate_gates_agree_exactly() {
    let x = Tensor::randn(&[2, 6, 4, 4], 1.0, &mut seeded(22));
    let w = Tensor::randn(&[2, 8, 4, 4], 1.0, &mut seeded(23));
    let grads = |unified: bool| {
        let (b, mut store) = block(OsBlockSpec { unified_gate: unified, ..small(1) }, 24);
        let report = shared_gate_gradient_check(&b, &mut store, &x, &w, BlockProbe::default(), 1e-3).unwrap();
        assert!(report.passed(1e-3));
        b.gate_params().iter().map(|&id| store.get(id).grad.clone()).collect::<Vec<_>>()
    };
    assert_eq!(grads(true), grads(false));
}

#[test]
fn random_block_gradients_match_finite_differences() {
    for kind in CandidateKind::ALL {
        let (b, mut store) = block(OsBlockSpec { variant: kind, ..small(4) }, 25);
        let x = Tensor::randn(&[2, 6, 5, 4], 1.0, &mut seeded(26));
        let w = Tensor::randn(&[2, 8, 5, 4], 1.0, &mut seeded(27));
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(kind.name(), &mut store, &ids, 6, 1e-3, |tape, store| {
            let xv = tape.constant(x.clone());
            let mut ctx = Ctx::new(tape, store, Mode::Train);
            let y = b.forward(&mut ctx, xv, Selection::Fixed)?;
            let wv = ctx.tape.constant(w.clone());
            let p = ctx.tape.mul(y, wv)?;
            ctx.tape.sum(p)
        })
        .unwrap();
        assert!(report.passed(), "{}: {:.3e}", report.name, report.max_rel_err);
    }
}

#[test]
fn block_rejects_wrong_input_width() {
    let (b, mut store) = block(small(2), 28);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 5, 4, 4]));
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
    assert!(b.forward(&mut ctx, x, Selection::Fixed).is_err());
}

#[test]
fn channel_plans_follow_width_multiplier() {
    assert_eq!(ModelSpec::default().channels().as_list(), [64, 256, 256, 384, 384, 512, 512, 512]);
    let half = ModelSpec::with_multipliers(0.5, 1.0).channels();
    assert_eq!(half.as_list(), [32, 128, 128, 192, 192, 256, 256, 256]);
    assert_eq!(half.fc, 512);
}

#[test]
fn full_network_yields_512_features_at_every_resolution() {
    for gamma in [1.0, 0.75, 0.5, 0.25] {
        let spec = ModelSpec { width_multiplier: 0.25, resolution_multiplier: gamma, ..ModelSpec::default() };
        let mut model = build_model(&spec, 29).unwrap();
        let (h, w) = spec.input_size();
        let x = Tensor::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut seeded(30));
        let f = model.extract_features(&x, 1).unwrap();
        assert_eq!(f.shape(), [1, 512], "gamma {gamma}");
        assert!(f.is_finite());
    }
}

#[test]
fn costs_are_monotone_in_multipliers() {
    let grid = [0.25, 0.5, 0.75, 1.0];
    let mut last_params = 0;
    for beta in grid {
        let spec = ModelSpec::with_multipliers(beta, 1.0);
        let p = count_params(&spec).unwrap();
        assert!(p >= last_params);
        last_params = p;
        let mut last_ma = 0;
        for gamma in grid {
            let ma = count_mult_adds_at_resolution(&ModelSpec::with_multipliers(beta, gamma)).unwrap();
            assert!(ma >= last_ma, "beta {beta} gamma {gamma}");
            last_ma = ma;
        }
    }
    for gamma in grid {
        let mut last = 0;
        for beta in grid {
            let ma = count_mult_adds_at_resolution(&ModelSpec::with_multipliers(beta, gamma)).unwrap();
            assert!(ma >= last);
            last = ma;
        }
    }
}

#[test]
fn reference_costs_are_close_to_published_figures() {
    let full = ModelSpec::default();
    let params = count_params(&full).unwrap() as f64;
    let ma = count_mult_adds(&full, 256, 128).unwrap() as f64;
    assert!((params / 2.2e6 - 1.0).abs() <= 0.15, "{params}");
    assert!((ma / 978.9e6 - 1.0).abs() <= 0.15, "{ma}");

    let ratio = |gamma: f64| count_mult_adds_at_resolution(&ModelSpec::with_multipliers(1.0, gamma)).unwrap() as f64 / ma;
    assert!((ratio(0.5) / (244.9 / 978.9) - 1.0).abs() <= 0.02);
    assert!((ratio(0.75) / (550.7 / 978.9) - 1.0).abs() <= 0.02);
    let quarter = count_params(&ModelSpec::with_multipliers(0.25, 1.0)).unwrap() as f64;
    assert!((quarter - 0.2e6).abs() <= 0.1e6, "{quarter}");
}

#[test]
fn variants_change_only_instance_norm_parameters() {
    let base = count_params(&ModelSpec::default()).unwrap();
    for kind in CandidateKind::ALL {
        let spec = ModelSpec { variants: vec![kind; 6], ..ModelSpec::default() };
        let extra: usize = spec.block_specs().iter().map(|b| kind.extra_params(b.out_channels)).sum();
        assert_eq!(count_params(&spec).unwrap(), base + extra);
    }
}
