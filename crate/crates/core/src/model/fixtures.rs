//! Small deterministic model instances for gradient checks, algebraic
//! identities and benchmarks.

use crate::tensor::gradcheck::GradReport;
use crate::tensor::{Float, Graph, Tensor};

use super::flow::{fm_loss, gaussian};
use super::{CameraInput, Conditions, Grid, ModelConfig, ModelError, Params, RenderCond, Variant};

/// Two frames of 4×4 pixels at patch 2.
pub const TINY_GRID: Grid = Grid { f: 2, h: 2, w: 2 };
/// The same frames downsampled by two.
pub const TINY_RENDER_GRID: Grid = Grid { f: 2, h: 1, w: 1 };

pub fn tiny_config(variant: Variant, d: usize, depth: usize, heads: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d,
        depth,
        heads,
        patch: 2,
        variant,
        seed,
    }
}

pub fn random_tensor<T: Float>(shape: &[usize], seed: u64, std: f64) -> Tensor<T> {
    gaussian::<T>(shape, seed).map(|v| v * T::from_f64c(std))
}

/// Random conditions carrying every input the variant accepts.
pub fn random_conditions<T: Float>(
    cfg: &ModelConfig,
    grid: Grid,
    render_grid: Grid,
    seed: u64,
) -> Conditions<T> {
    let c = cfg.latent_dim();
    let cam = match cfg.variant.camera_input() {
        CameraInput::None => None,
        CameraInput::Extrinsics => Some(random_tensor(&[grid.f, 12], seed + 1, 0.5)),
        CameraInput::PluckerTokens => Some(random_tensor(&[grid.f, cfg.plucker_dim()], seed + 1, 0.5)),
        CameraInput::PluckerField => Some(random_tensor(&[grid.tokens(), cfg.plucker_dim()], seed + 1, 0.5)),
    };
    let render = cfg.variant.uses_render().then(|| {
        let nr = render_grid.tokens();
        RenderCond {
            tokens: random_tensor(&[nr, c], seed + 2, 1.0),
            hole: random_tensor::<T>(&[nr, 1], seed + 3, 1.0).map(|v| v.abs().min(T::one())),
            grid: render_grid,
        }
    });
    Conditions {
        grid,
        src: random_tensor(&[grid.tokens(), c], seed + 4, 1.0),
        cam,
        render,
    }
}

/// One training example: clean latent, noise, time and conditions.
#[derive(Clone, Debug)]
pub struct Instance<T> {
    pub z0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: f64,
    pub cond: Conditions<T>,
}

pub fn random_instance<T: Float>(cfg: &ModelConfig, seed: u64) -> Instance<T> {
    let n = TINY_GRID.tokens();
    Instance {
        z0: random_tensor(&[n, cfg.latent_dim()], seed + 10, 1.0),
        eps: random_tensor(&[n, cfg.latent_dim()], seed + 11, 1.0),
        t: 0.37,
        cond: random_conditions(cfg, TINY_GRID, TINY_RENDER_GRID, seed),
    }
}

pub fn loss_value(params: &Params<f64>, inst: &Instance<f64>) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let w = params.bind(&mut g, |_| false);
    let l = fm_loss(&mut g, &w, &params.config, &inst.z0, inst.t, &inst.eps, &inst.cond)?;
    Ok(g.value(l).data()[0])
}

/// Analytic gradient of the flow-matching loss with respect to every weight
/// against central differences with step `h`, weights in name order.
pub fn model_gradcheck(
    params: &Params<f64>,
    inst: &Instance<f64>,
    h: f64,
    tol: f64,
) -> Result<GradReport, ModelError> {
    let mut g = Graph::new();
    let w = params.bind(&mut g, |_| true);
    let l = fm_loss(&mut g, &w, &params.config, &inst.z0, inst.t, &inst.eps, &inst.cond)?;
    let grads = g.backward(l)?;
    let mut analytic = Vec::with_capacity(params.numel());
    for (name, t) in params.iter() {
        match grads.get(w.get(name)?) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for name in &names {
        let n = params.get(name).expect("listed").numel();
        for i in 0..n {
            let orig = params.get(name).expect("listed").data()[i];
            probe.get_mut(name).expect("listed").data_mut()[i] = orig + h;
            let plus = loss_value(&probe, inst)?;
            probe.get_mut(name).expect("listed").data_mut()[i] = orig - h;
            let minus = loss_value(&probe, inst)?;
            probe.get_mut(name).expect("listed").data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(GradReport::compare(&analytic, &numeric, tol))
}

/// Initialized weights moved off the zero-gate point so every path carries
/// signal: all weights get an extra small normal perturbation.
pub fn active_params(cfg: &ModelConfig, seed: u64) -> Result<Params<f64>, ModelError> {
    let mut p = Params::<f64>::init(cfg)?;
    let base = p.clone();
    p.randomize(seed, 0.3, |_| true);
    for (name, t) in p.iter_mut() {
        let b = base.get(name).expect("same layout");
        for (v, &o) in t.data_mut().iter_mut().zip(b.data()) {
            *v += o;
        }
    }
    Ok(p)
}
