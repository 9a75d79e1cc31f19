//! The stochastic-objective interface the optimizer loops drive.

use crate::error::Result;
use crate::matrix::Matrix;

/// Per-iteration batch data. For tape-backed problems these are the tensors
/// bound to the tape's input slots; for analytic problems they carry the
/// iteration's noise draws. Regenerated deterministically from the problem's
/// dataset seed and the iteration index.
pub type Batch = Vec<Matrix>;

/// A stochastic objective exposing loss, gradient, and Hessian-vector
/// product under a seeded batch.
pub trait Problem {
    fn name(&self) -> &str;

    /// Shapes of the parameter tensors, one preconditioner per tensor.
    fn param_shapes(&self) -> &[(usize, usize)];

    /// Initial parameter values for a run seed.
    fn init_params(&self, seed: u64) -> Vec<Matrix>;

    /// The batch for an iteration; deterministic in (dataset seed,
    /// iteration, batch_size).
    fn make_batch(&self, iteration: u64, batch_size: usize) -> Batch;

    fn loss(&self, params: &[Matrix], batch: &Batch) -> Result<f64>;

    fn loss_and_gradient(&self, params: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)>;

    /// Hessian-vector product along `v` under the same batch.
    fn hvp(&self, params: &[Matrix], batch: &Batch, v: &[Matrix]) -> Result<Vec<Matrix>>;

    /// Loss, gradient, and HVP under one batch; tape-backed problems
    /// override this with a single graph sweep.
    fn loss_grad_hvp(
        &self,
        params: &[Matrix],
        batch: &Batch,
        v: &[Matrix],
    ) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
        let (loss, grad) = self.loss_and_gradient(params, batch)?;
        let hv = self.hvp(params, batch, v)?;
        Ok((loss, grad, hv))
    }

    /// Loss over the full dataset (noise-free where the problem defines it);
    /// used for final reporting, not on the optimization path.
    fn full_loss(&self, params: &[Matrix]) -> Result<f64>;

    /// Total flattened parameter dimension.
    fn total_dim(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }
}
