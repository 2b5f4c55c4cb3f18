use rand::Rng;

use super::{he_normal, Bound, ConvGeom, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::Result;

/// Convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        let weight = store.add(format!("{name}.weight"), he_normal(rng, &[cout, cin, k, k], cin * k * k));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d { weight, bias, geom, cin, cout }
    }

    /// Same layer with weights (and bias) set to zero.
    pub fn zeroed<T: Real>(self, store: &mut ParamStore<T>) -> Self {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        self
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }

    /// Multiply-accumulate count times two for an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = (self.geom.conv_out(h)?, self.geom.conv_out(w)?);
        Ok(2 * (self.geom.kernel * self.geom.kernel * self.cin * self.cout * oh * ow) as u64)
    }
}

/// Transposed convolution with weights `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Deconv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        // Each output sees about cin * k^2 / stride^2 inputs.
        let fan_in = (cin * k * k / (geom.stride * geom.stride)).max(1);
        let weight = store.add(format!("{name}.weight"), he_normal(rng, &[cin, cout, k, k], fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Deconv2d { weight, bias, geom, cin, cout }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.deconv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }

    /// Counted on the input grid: every input cell scatters `k^2 cout`
    /// products.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.geom.kernel * self.geom.kernel * self.cin * self.cout * h * w) as u64
    }
}
