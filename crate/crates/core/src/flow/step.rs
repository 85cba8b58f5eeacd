use crate::error::Result;
use crate::flow::{Actnorm, AffineInjector, ConditionalAffineCoupling, Direction, InvConv1x1, LayerIO};
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;

/// One flow step. Towards the latent it runs actnorm, 1×1 conv, then the
/// coupling and injector in their inverse direction; towards the data it
/// runs the exact reverse.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: Actnorm,
    pub invconv: InvConv1x1,
    pub coupling: ConditionalAffineCoupling,
    pub injector: AffineInjector,
}

impl FlowStep {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            actnorm: Actnorm::new(store, &format!("{prefix}.actnorm"), channels),
            invconv: InvConv1x1::new(store, &format!("{prefix}.invconv"), channels, rng),
            coupling: ConditionalAffineCoupling::new(
                store,
                &format!("{prefix}.coupling"),
                channels,
                cond_channels,
                hidden,
                rng,
            )?,
            injector: AffineInjector::new(store, &format!("{prefix}.injector"), channels, cond_channels, hidden, rng),
        })
    }

    pub fn apply<'t>(&self, p: &Binding<'t>, io: LayerIO<'t>, dir: Direction) -> Result<LayerIO<'t>> {
        match dir {
            Direction::Forward => {
                let io = self.actnorm.apply(p, io, Direction::Forward)?;
                let io = self.invconv.apply(p, io, Direction::Forward)?;
                let io = self.coupling.apply(p, io, Direction::Reverse)?;
                self.injector.apply(p, io, Direction::Reverse)
            }
            Direction::Reverse => {
                let io = self.injector.apply(p, io, Direction::Forward)?;
                let io = self.coupling.apply(p, io, Direction::Forward)?;
                let io = self.invconv.apply(p, io, Direction::Reverse)?;
                self.actnorm.apply(p, io, Direction::Reverse)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use nalgebra::DMatrix;

    fn random_step(channels: usize, cond: usize, rng: &mut Rng) -> (ParamStore, FlowStep) {
        let mut store = ParamStore::new();
        let mut step = FlowStep::new(&mut store, "s", channels, cond, 5, rng).unwrap();
        step.actnorm.mark_initialized();
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).clone();
            let noise = Tensor::randn(t.shape(), 0.3, rng);
            store.set(id, t.zip_map(&noise, |a, b| a + b).unwrap()).unwrap();
        }
        (store, step)
    }

    fn encode(store: &ParamStore, step: &FlowStep, x: &Tensor, h: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let p = Binding::frozen(store, &tape);
        let io = LayerIO::new(tape.constant(x.clone()), Some(tape.constant(h.clone())));
        let out = step.apply(&p, io, Direction::Forward).unwrap();
        ((*out.act.value()).clone(), (*out.logdet.value()).clone())
    }

    #[test]
    fn identity_params_give_identity() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let mut step = FlowStep::new(&mut store, "s", 4, 2, 5, &mut rng).unwrap();
        step.invconv = InvConv1x1::identity(&mut store, "id", 4);
        step.actnorm.mark_initialized();
        let x = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        let h = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let (y, ld) = encode(&store, &step, &x, &h);
        assert_eq!(y, x);
        assert_eq!(ld.data(), &[0.0]);
    }

    #[test]
    fn round_trip_random_params() {
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let (store, step) = random_step(4, 3, &mut rng);
            let x = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng);
            let h = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng);
            let tape = Tape::new();
            let p = Binding::frozen(&store, &tape);
            let io = LayerIO::new(tape.constant(x.clone()), Some(tape.constant(h)));
            let z = step.apply(&p, io, Direction::Forward).unwrap();
            let back = step.apply(&p, z, Direction::Reverse).unwrap();
            assert!(back.act.value().max_abs_diff(&x) < 1e-9);
            assert!(back.logdet.value().max_abs() < 1e-9);
        }
    }

    #[test]
    fn logdet_is_sum_of_layers() {
        let mut rng = Rng::new(5);
        let (store, step) = random_step(4, 2, &mut rng);
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let h = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let cond = Some(tape.constant(h.clone()));
        let a = step
            .actnorm
            .apply(&p, LayerIO::new(tape.constant(x.clone()), cond), Direction::Forward)
            .unwrap();
        let b = step.invconv.apply(&p, LayerIO::new(a.act, cond), Direction::Forward).unwrap();
        let c = step.coupling.apply(&p, LayerIO::new(b.act, cond), Direction::Reverse).unwrap();
        let d = step.injector.apply(&p, LayerIO::new(c.act, cond), Direction::Reverse).unwrap();
        let mut total = Tensor::zeros(&[2]);
        for part in [a, b, c, d] {
            total = total.zip_map(&part.logdet.value(), |u, v| u + v).unwrap();
        }
        let (_, ld) = encode(&store, &step, &x, &h);
        assert!(ld.max_abs_diff(&total) < 1e-12);
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let mut rng = Rng::new(9);
        let (store, step) = random_step(4, 2, &mut rng);
        let x = Tensor::randn(&[1, 4, 3, 4], 1.0, &mut rng);
        let h = Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        let d = x.len();
        let (_, ld) = encode(&store, &step, &x, &h);
        let eps = 1e-5;
        let mut jac = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let (yp, _) = encode(&store, &step, &xp, &h);
            let (ym, _) = encode(&store, &step, &xm, &h);
            for i in 0..d {
                jac[(i, j)] = (yp.data()[i] - ym.data()[i]) / (2.0 * eps);
            }
        }
        let numeric = jac.determinant().abs().ln();
        assert!((numeric - ld.item()).abs() < 1e-5, "{numeric} vs {}", ld.item());
    }
}
