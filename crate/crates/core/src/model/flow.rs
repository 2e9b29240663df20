//! Flow matching: the straight noising path, the velocity loss and a
//! deterministic Euler sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Float, Graph, Tensor, Var};

use super::dit::{dit_forward, dit_velocity};
use super::params::Bound;
use super::{Conditions, ModelConfig, ModelError, Params};

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(), ModelError> {
    if a.shape() != b.shape() {
        return Err(ModelError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `z_t = (1 − t)·z0 + t·ε`, elementwise.
pub fn forward_noise<T: Float>(z0: &Tensor<T>, t: f64, eps: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    same_shape(z0, eps, "forward_noise")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::Shape(format!("noise level {t} outside [0, 1]")));
    }
    let (a, b) = (T::from_f64c(1.0 - t), T::from_f64c(t));
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a * z + b * e).collect();
    Ok(Tensor::new(z0.shape().to_vec(), data)?)
}

/// Standard normal tensor from a seeded stream.
pub fn gaussian<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64c(z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized above")
}

/// Mean squared error between the predicted velocity at `z_t` and `ε − z0`.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    cfg: &ModelConfig,
    z0: &Tensor<T>,
    t: f64,
    eps: &Tensor<T>,
    cond: &Conditions<T>,
) -> Result<Var, ModelError> {
    let zt = forward_noise(z0, t, eps)?;
    let target: Vec<T> = eps.data().iter().zip(z0.data()).map(|(&e, &z)| e - z).collect();
    let target = g.constant(Tensor::new(z0.shape().to_vec(), target)?);
    let zt = g.constant(zt);
    let v = dit_forward(g, w, cfg, zt, t, cond)?;
    Ok(g.mse(v, target)?)
}

/// Anything that predicts a velocity for a state at time `t`.
pub trait Denoiser<T: Float> {
    fn velocity(&self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>, ModelError>;
}

/// The transformer with fixed weights and conditions.
pub struct DitDenoiser<'a, T> {
    pub params: &'a Params<T>,
    pub cond: &'a Conditions<T>,
}

impl<T: Float> Denoiser<T> for DitDenoiser<'_, T> {
    fn velocity(&self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>, ModelError> {
        dit_velocity(self.params, z, t, self.cond)
    }
}

/// The exact velocity `ε − z0` of the straight path between a known clean
/// sample and a known noise draw, whatever the state.
pub struct LinearOracle<T> {
    pub velocity: Tensor<T>,
}

impl<T: Float> LinearOracle<T> {
    pub fn new(z0: &Tensor<T>, eps: &Tensor<T>) -> Result<Self, ModelError> {
        same_shape(z0, eps, "LinearOracle")?;
        let v = eps.data().iter().zip(z0.data()).map(|(&e, &z)| e - z).collect();
        Ok(Self {
            velocity: Tensor::new(z0.shape().to_vec(), v)?,
        })
    }
}

impl<T: Float> Denoiser<T> for LinearOracle<T> {
    fn velocity(&self, z: &Tensor<T>, _t: f64) -> Result<Tensor<T>, ModelError> {
        same_shape(z, &self.velocity, "LinearOracle")?;
        Ok(self.velocity.clone())
    }
}

/// Integrates `dz/dt = V(z, t)` from `z_1 = gaussian(seed)` down to `t = 0`
/// with `steps` uniform Euler steps.
pub fn euler_sample<T: Float>(
    model: &impl Denoiser<T>,
    shape: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>, ModelError> {
    euler_integrate(model, gaussian::<T>(shape, seed), steps)
}

/// Euler integration from a given state at `t = 1` to `t = 0`, with
/// `t_k = (steps − k) / steps`.
pub fn euler_integrate<T: Float>(model: &impl Denoiser<T>, start: Tensor<T>, steps: usize) -> Result<Tensor<T>, ModelError> {
    if steps == 0 {
        return Err(ModelError::Config("the sampler needs at least one step".into()));
    }
    let mut z = start;
    let n = steps as f64;
    for k in 0..steps {
        let t = (steps - k) as f64 / n;
        let t_next = (steps - k - 1) as f64 / n;
        let v = model.velocity(&z, t)?;
        same_shape(&z, &v, "velocity")?;
        let dt = T::from_f64c(t - t_next);
        for (zi, &vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
    }
    Ok(z)
}
