//! Weight-normalized convolution parameters and their seeded initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use unimelgan_tensor::{Conv1dSpec, Conv2dSpec, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

/// Read access to a parameter store on a tape. Frozen access yields
/// leaves without gradients that always see the store's current values.
#[derive(Clone, Copy)]
pub struct Access<'a> {
    pub store: &'a ParamStore,
    pub frozen: bool,
}

impl Access<'_> {
    pub fn get(&self, tape: &Tape, id: ParamId) -> Var {
        if self.frozen {
            tape.frozen_param(self.store, id)
        } else {
            tape.param(self.store, id)
        }
    }
}

/// Parameters of one (possibly weight-normalized) convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    v: ParamId,
    g: Option<ParamId>,
    b: ParamId,
}

impl ConvParams {
    pub fn weight(&self, tape: &Tape, p: Access) -> Result<Var> {
        let v = p.get(tape, self.v);
        Ok(match self.g {
            Some(g) => tape.weight_norm(&v, &p.get(tape, g))?,
            None => v,
        })
    }

    pub fn bias(&self, tape: &Tape, p: Access) -> Var {
        p.get(tape, self.b)
    }
}

/// Seeded parameter factory shared by every model in the crate.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f32>,
    weight_norm: bool,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, std: f32, weight_norm: bool) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("positive std"),
            weight_norm,
        }
    }

    /// Weight of `shape` drawn from N(0, std); gain (per axis-0 slice) set to
    /// the slice norm so the effective weight equals the draw; zero bias of
    /// `bias_len` entries.
    pub fn conv(&mut self, prefix: &str, shape: [usize; 3], bias_len: usize) -> ConvParams {
        self.conv_nd(prefix, &shape, bias_len)
    }

    pub fn conv_nd(&mut self, prefix: &str, shape: &[usize], bias_len: usize) -> ConvParams {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        let rows = shape[0];
        let per = n / rows;
        let (v, g) = if self.weight_norm {
            let norms: Vec<f32> = data
                .chunks(per)
                .map(|c| c.iter().map(|x| x * x).sum::<f32>().sqrt())
                .collect();
            let v = self.store.insert(format!("{prefix}.weight_v"), Tensor::new(shape.to_vec(), data));
            let g = self.store.insert(format!("{prefix}.weight_g"), Tensor::new(vec![rows], norms));
            (v, Some(g))
        } else {
            (self.store.insert(format!("{prefix}.weight"), Tensor::new(shape.to_vec(), data)), None)
        };
        let b = self.store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![bias_len]));
        ConvParams { v, g, b }
    }
}

pub fn conv_layer(tape: &Tape, access: Access, p: &ConvParams, x: &Var, spec: Conv1dSpec) -> Result<Var> {
    let w = p.weight(tape, access)?;
    Ok(tape.conv1d(x, &w, Some(&p.bias(tape, access)), spec)?)
}

pub fn conv2d_layer(
    tape: &Tape,
    access: Access,
    p: &ConvParams,
    x: &Var,
    spec: Conv2dSpec,
) -> Result<Var> {
    let w = p.weight(tape, access)?;
    Ok(tape.conv2d(x, &w, Some(&p.bias(tape, access)), spec)?)
}

