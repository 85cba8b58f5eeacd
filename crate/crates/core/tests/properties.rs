use proptest::prelude::*;

use deflow::conditioning::{make_condition, ConditionSpec};
use deflow::data::DegradationOracle;
use deflow::flow::{
    split, squeeze, unsplit, unsqueeze, Actnorm, AffineInjector, ConditionalAffineCoupling, Direction, InvConv1x1,
    LayerIO,
};
use deflow::gauss1d::{fit_closed_form, joint_marginal_nll_1d, Gauss1DSolution, SampleSets1D, ShiftCase};
use deflow::model::{DeFlowModel, ModelConfig};
use deflow::params::{Binding, ParamStore};
use deflow::shift::{logp_zx, LatentShift, ShiftMode};
use deflow::{Rng, Tape, Tensor};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn perturb(store: &mut ParamStore, std: f64, rng: &mut Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id).clone();
        let noise = Tensor::randn(t.shape(), std, rng);
        store.set(id, t.zip_map(&noise, |a, b| a + b).unwrap()).unwrap();
    }
}

fn sample_sets(seed: u64, n: usize, m: usize, sx: f64, sy: f64) -> SampleSets1D {
    let mut rng = Rng::new(seed);
    let xs = (0..n).map(|_| 0.3 + sx * rng.normal()).collect();
    let ys = (0..m).map(|_| -0.2 + sy * rng.normal()).collect();
    SampleSets1D::new(xs, ys)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn closed_form_case_is_the_variance_predicate(
        seed in any::<u64>(), n in 2usize..200, m in 2usize..200, sx in 0.1f64..3.0, sy in 0.1f64..3.0,
    ) {
        let s = sample_sets(seed, n, m, sx, sy);
        let fit = fit_closed_form(&s).unwrap();
        prop_assert!(fit.var_x >= 0.0 && fit.var_u >= 0.0);
        prop_assert_eq!(fit.case == ShiftCase::NoisierTarget, s.var_y() >= s.var_x());
        if fit.case == ShiftCase::ConstantShift {
            prop_assert_eq!(fit.var_u, 0.0);
        }
    }

    #[test]
    fn closed_form_is_a_local_minimum(
        seed in any::<u64>(), n in 5usize..300, m in 5usize..300, sx in 0.2f64..2.0, sy in 0.2f64..2.0,
    ) {
        let s = sample_sets(seed, n, m, sx, sy);
        let fit = fit_closed_form(&s).unwrap();
        let f0 = joint_marginal_nll_1d(&fit, &s).unwrap();
        let h = 1e-4;
        for axis in 0..4 {
            let mut v = [fit.mu_x, fit.var_x, fit.mu_u, fit.var_u];
            let mut around = Vec::new();
            for d in [-h, h] {
                v[axis] += d;
                around.push(Gauss1DSolution::new(v[0], v[1], v[2], v[3]).ok().map(|p| joint_marginal_nll_1d(&p, &s).unwrap()));
                v[axis] -= d;
            }
            for f in around.into_iter().flatten() {
                prop_assert!(f >= f0 - 1e-12, "axis {} decreased NLL: {} < {}", axis, f, f0);
            }
        }
    }

    #[test]
    fn cached_moments_match_recomputation(xs in prop::collection::vec(-5.0f64..5.0, 1..100), ys in prop::collection::vec(-5.0f64..5.0, 1..100)) {
        let s = SampleSets1D::new(xs.clone(), ys.clone());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| { let m = mean(v); v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64 };
        prop_assert!((s.mean_x() - mean(&xs)).abs() <= 1e-12);
        prop_assert!((s.mean_y() - mean(&ys)).abs() <= 1e-12);
        prop_assert!((s.var_x() - var(&xs)).abs() <= 1e-12);
        prop_assert!((s.var_y() - var(&ys)).abs() <= 1e-12);
    }

    #[test]
    fn broadcast_add_and_mul_commute(seed in any::<u64>(), c in 1usize..4, hw in 1usize..4) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[2, c, hw, hw], 1.0, &mut rng);
        let b = Tensor::randn(&[2, c, hw, hw], 1.0, &mut rng);
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let (ab, ba) = (va.add(vb).unwrap().value(), vb.add(va).unwrap().value());
        prop_assert_eq!(ab.data(), ba.data());
        let (ab, ba) = (va.mul(vb).unwrap().value(), vb.mul(va).unwrap().value());
        prop_assert_eq!(ab.data(), ba.data());
    }

    #[test]
    fn fan_out_gradients_accumulate(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        // d/dx Σ (x·x + tanh x) = 2x + 1 − tanh²x
        let loss = v.mul(v).unwrap().add(v.tanh()).unwrap().sum();
        let g = tape.backward(loss).unwrap().wrt(v);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            prop_assert!((gi - (2.0 * xi + 1.0 - xi.tanh().powi(2))).abs() <= 1e-12);
        }
    }

    #[test]
    fn actnorm_init_standardizes(seed in any::<u64>(), c in 1usize..5, loc in -3.0f64..3.0, spread in 0.1f64..4.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[3, c, 4, 4], spread, &mut rng).map(|v| v + loc);
        let mut store = ParamStore::new();
        let mut an = Actnorm::new(&mut store, "a", c);
        an.initialize_from(&mut store, &x).unwrap();
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let y = an.apply(&p, LayerIO::new(tape.constant(x), None), Direction::Forward).unwrap().act.value();
        let plane = 3 * 16;
        for ch in 0..c {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.data()[(n * c + ch) * 16..(n * c + ch + 1) * 16].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / plane as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / plane as f64;
            prop_assert!(m.abs() <= 1e-6 && (v - 1.0).abs() <= 1e-6, "channel {}: mean {}, var {}", ch, m, v);
        }
    }

    #[test]
    fn invconv_determinant_is_exp_log_diag(seed in any::<u64>(), c in 1usize..7) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let ic = InvConv1x1::new(&mut store, "w", c, &mut rng);
        perturb(&mut store, 0.3, &mut rng);
        let w = ic.weight(&store);
        let det = nalgebra::DMatrix::from_row_slice(c, c, w.data()).determinant();
        let expected = store.get(ic.log_diag()).data().iter().sum::<f64>();
        prop_assert!((det.abs().ln() - expected).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn layers_invert_on_random_shapes(seed in any::<u64>(), half in 1usize..3, hw in 1usize..4, hidden in 1usize..6) {
        let c = 2 * half;
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[2, c, 2 * hw, 2 * hw], 1.0, &mut rng);
        let h = Tensor::randn(&[2, 2, 2 * hw, 2 * hw], 1.0, &mut rng);
        let mut store = ParamStore::new();
        let cp = ConditionalAffineCoupling::new(&mut store, "c", c, 2, hidden, &mut rng).unwrap();
        let inj = AffineInjector::new(&mut store, "i", c, 2, hidden, &mut rng);
        let ic = InvConv1x1::new(&mut store, "w", c, &mut rng);
        perturb(&mut store, 0.3, &mut rng);
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let cond = Some(tape.constant(h));
        let mut io = LayerIO::new(tape.constant(x.clone()), cond);
        io = ic.apply(&p, io, Direction::Forward).unwrap();
        io = cp.apply(&p, io, Direction::Reverse).unwrap();
        io = inj.apply(&p, io, Direction::Reverse).unwrap();
        let forward_logdet = io.logdet.value();
        let mut back = LayerIO::new(io.act, cond);
        back = inj.apply(&p, back, Direction::Forward).unwrap();
        back = cp.apply(&p, back, Direction::Forward).unwrap();
        back = ic.apply(&p, back, Direction::Reverse).unwrap();
        prop_assert!(back.act.value().max_abs_diff(&x) <= 1e-9);
        // Logdet accumulates additively, so the round trip cancels it.
        let total = forward_logdet.zip_map(&back.logdet.value(), |a, b| a + b).unwrap();
        prop_assert!(total.data().iter().all(|v| v.abs() <= 1e-9));

        let v = tape.constant(x.clone());
        let sq = unsqueeze(squeeze(v).unwrap()).unwrap().value();
        prop_assert_eq!(sq.data(), x.data());
        let (a, b) = split(v).unwrap();
        let joined = unsplit(a, b).unwrap().value();
        prop_assert_eq!(joined.data(), x.data());
    }

    #[test]
    fn shift_covariance_is_symmetric_psd(seed in any::<u64>(), c in 1usize..6, diagonal in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let mode = if diagonal { ShiftMode::Diagonal } else { ShiftMode::Full };
        let shift = LatentShift::new(&mut store, "u", c, mode);
        prop_assert!(store.get(shift.mu()).data().iter().all(|v| *v == 0.0));
        prop_assert!(store.get(shift.m()).data().iter().all(|v| *v == 0.0));
        perturb(&mut store, 1.0, &mut rng);
        let cov = shift.covariance(&store);
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(cov.data()[i * c + j], cov.data()[j * c + i]);
            }
        }
        let probe = Tensor::randn(&[c], 1.0, &mut rng);
        let quad: f64 = (0..c).map(|i| (0..c).map(|j| probe.data()[i] * cov.data()[i * c + j] * probe.data()[j]).sum::<f64>()).sum();
        prop_assert!(quad >= -1e-12);
    }

    #[test]
    fn zero_shift_density_equals_standard_normal(seed in any::<u64>(), c in 1usize..5) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let shift = LatentShift::new(&mut store, "u", c, ShiftMode::Full);
        let z = Tensor::randn(&[2, c, 3, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let v = tape.constant(z);
        let a = shift.logp_zy(&p, v).unwrap().value();
        let b = logp_zx(&tape, &[v]).unwrap().value();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn condition_is_seed_reproducible(seed in any::<u64>(), noise in 0.0f64..0.1) {
        let mut rng = Rng::new(seed);
        let img = Tensor::new(&[1, 3, 8, 8], (0..192).map(|_| rng.uniform()).collect()).unwrap();
        let spec = ConditionSpec { noise_sigma: noise, ..ConditionSpec::default() };
        let a = make_condition(&img, &spec, &mut Rng::new(seed ^ 1)).unwrap();
        let b = make_condition(&img, &spec, &mut Rng::new(seed ^ 1)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn oracle_reapplication_differs(seed in any::<u64>(), sigma in 0.01f64..0.2) {
        let oracle = DegradationOracle::WhiteNoise { sigma };
        let img = Tensor::zeros(&[3, 16, 16]);
        let a = oracle.apply(&img, &mut Rng::new(seed)).unwrap();
        let b = oracle.apply(&img, &mut Rng::new(seed.wrapping_add(1))).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u != v));
        let sd = |t: &Tensor| (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        // 768 draws: the sample std is within ±15% with overwhelming probability.
        prop_assert!((sd(&a) / sigma - 1.0).abs() < 0.15 && (sd(&b) / sigma - 1.0).abs() < 0.15);
    }
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn model_round_trip_and_dimension(seed in any::<u64>(), levels in 1usize..3, steps in 1usize..3) {
        let cfg = ModelConfig { levels, steps, hidden: 4, ..ModelConfig::default() };
        let mut model = DeFlowModel::new(cfg, seed).unwrap();
        let mut rng = Rng::new(seed);
        perturb(model.store_mut(), 0.05, &mut rng);
        let x = Tensor::new(&[2, 3, 8, 8], (0..384).map(|_| rng.uniform()).collect()).unwrap();
        let h = model.condition(&x, &mut rng).unwrap();
        model.initialize(&x, h.as_ref()).unwrap();
        let z = model.latents(&x, h.as_ref()).unwrap();
        prop_assert_eq!(z.iter().map(Tensor::len).sum::<usize>(), x.len());
        let tape = Tape::new();
        let p = Binding::frozen(model.store(), &tape);
        let groups: Vec<_> = z.iter().map(|g| tape.constant(g.clone())).collect();
        let back = model.decode(&p, &groups, h.as_ref()).unwrap();
        prop_assert!(back.value().max_abs_diff(&x) <= 1e-8);
    }

    #[test]
    fn zero_shift_sides_agree(seed in any::<u64>()) {
        let cfg = ModelConfig { levels: 1, steps: 1, hidden: 4, ..ModelConfig::default() };
        let mut model = DeFlowModel::new(cfg, seed).unwrap();
        let mut rng = Rng::new(seed);
        let x = Tensor::new(&[2, 3, 4, 4], (0..96).map(|_| rng.uniform()).collect()).unwrap();
        let h = model.condition(&x, &mut rng).unwrap();
        model.initialize(&x, h.as_ref()).unwrap();
        let a = model.nll_per_dim(&x, h.as_ref(), false).unwrap();
        let b = model.nll_per_dim(&x, h.as_ref(), true).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }
}
