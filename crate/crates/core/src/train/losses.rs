//! Batch losses. Each is the batch mean of a squared Euclidean residual.

use ndarray::{Array1, Array2};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{forward, forward_with_tangent, BoundParams, MapParams};
use crate::observer::ObserverDesign;
use crate::sim::SystemModel;

fn nonempty(v: &Var<'_>, loss: &str) -> Result<usize> {
    let rows = v.shape().0;
    if rows == 0 {
        return Err(Error::InsufficientData(format!("{loss}: empty batch")));
    }
    Ok(rows)
}

/// `mean_i ||target_i - pred_i||^2`.
pub fn mean_squared_residual<'g>(target: Var<'g>, pred: Var<'g>) -> Result<Var<'g>> {
    let rows = nonempty(&target, "squared residual")?;
    Ok(target.sub(pred)?.squared_norm().scale(1.0 / rows as f64))
}

/// `||z - F_theta(x)||^2`.
pub fn loss_lz<'g>(
    fwd: &MapParams,
    theta: &BoundParams<'g>,
    x: Var<'g>,
    z: Var<'g>,
) -> Result<Var<'g>> {
    nonempty(&x, "L_z")?;
    mean_squared_residual(z, forward(fwd, theta, x)?)
}

/// `||x - F^-1_eta(z)||^2` on observer labels (parallel forward computation).
pub fn loss_lx_parallel<'g>(
    inv: &MapParams,
    eta: &BoundParams<'g>,
    z: Var<'g>,
    x: Var<'g>,
) -> Result<Var<'g>> {
    nonempty(&z, "L_x")?;
    mean_squared_residual(x, forward(inv, eta, z)?)
}

/// `||x - F^-1_eta(F_theta(x))||^2` (sequential forward computation).
pub fn loss_lx_sequential<'g>(
    fwd: &MapParams,
    theta: &BoundParams<'g>,
    inv: &MapParams,
    eta: &BoundParams<'g>,
    x: Var<'g>,
) -> Result<Var<'g>> {
    nonempty(&x, "L_x")?;
    let z_hat = forward(fwd, theta, x)?;
    mean_squared_residual(x, forward(inv, eta, z_hat)?)
}

/// `||y - h(F^-1_eta(z))||^2`.
pub fn loss_ly<'g>(
    inv: &MapParams,
    eta: &BoundParams<'g>,
    z: Var<'g>,
    y: Var<'g>,
    model: &dyn SystemModel,
) -> Result<Var<'g>> {
    nonempty(&z, "L_y")?;
    let x_hat = forward(inv, eta, z)?;
    mean_squared_residual(y, model.output_on_graph(x_hat)?)
}

/// Residual of the transformation PDE `dF/dx f(x) = A F(x) + B h(x)`, with the
/// directional derivative propagated as a tangent through the network.
pub fn loss_pde_residual<'g>(
    fwd: &MapParams,
    theta: &BoundParams<'g>,
    x: &Array2<f64>,
    model: &dyn SystemModel,
    design: &ObserverDesign,
) -> Result<Var<'g>> {
    let graph = theta
        .tensors
        .first()
        .ok_or_else(|| Error::shape("loss_pde_residual", "network without layers"))?
        .graph();
    if x.nrows() == 0 {
        return Err(Error::InsufficientData("PDE residual: empty batch".into()));
    }
    let fx = model.rhs_rows(x)?;
    let hx = model.output_rows(x)?;
    if hx.ncols() != 1 {
        return Err(Error::shape("loss_pde_residual", "single-output systems only"));
    }
    let (f_hat, jvp) = forward_with_tangent(fwd, theta, graph.constant(x.clone()), graph.constant(fx))?;
    let a_row = Array1::from(design.a_diag.clone()).insert_axis(ndarray::Axis(0));
    let b = Array1::from(design.b.clone());
    let bh = Array2::from_shape_fn((x.nrows(), design.dz()), |(i, j)| b[j] * hx[[i, 0]]);
    let af = f_hat.mul_row(graph.constant(a_row))?;
    let residual = jvp.sub(af)?.sub(graph.constant(bh))?;
    Ok(residual.squared_norm().scale(1.0 / x.nrows() as f64))
}
