use std::sync::Arc;

use rand::Rng;
use reskan_tensor::{Graph, ParamId, ParamStore, Scalar, Var};

use super::{basis, init_kan_tensors, Basis, BufferMeter, ConvPath, KanGeometry, KanVars};
use crate::error::Result;

/// A KAN convolution whose parameters live in a [`ParamStore`] under
/// `<name>.w_k`, `<name>.w_m` and (for learnable bases) `<name>.beta`.
#[derive(Clone)]
pub struct KanConvLayer<T: Scalar> {
    pub name: String,
    pub geom: KanGeometry,
    pub basis: Arc<dyn Basis<T>>,
    pub w: ParamId,
    pub wm: ParamId,
    pub beta: Option<ParamId>,
}

impl<T: Scalar> KanConvLayer<T> {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        geom: KanGeometry,
        basis_name: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let basis = basis::<T>(basis_name)?;
        let (w, wm, beta) = init_kan_tensors(&geom, basis.as_ref(), rng)?;
        let w = store.add(format!("{name}.w_k"), w)?;
        let wm = store.add(format!("{name}.w_m"), wm)?;
        let beta = beta.map(|b| store.add(format!("{name}.beta"), b)).transpose()?;
        Ok(KanConvLayer { name: name.to_string(), geom, basis, w, wm, beta })
    }

    pub fn vars(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> KanVars {
        KanVars { w: g.param(store, self.w), wm: g.param(store, self.wm), beta: self.beta.map(|b| g.param(store, b)) }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        path: &dyn ConvPath<T>,
        meter: &mut BufferMeter,
    ) -> Result<Var> {
        let vars = self.vars(g, store);
        path.forward(g, x, &vars, &self.geom, &self.basis, meter)
    }
}
