use serde::Serialize;

use crate::accounting::{Category, FlopsLedger};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::linalg::gram_schmidt_plane;
use crate::model::Model;
use crate::tensor::Tensor;

/// Test loss sampled on the plane through three weight snapshots.
///
/// Coordinates are in units of `scale = ‖w_ff − w0‖`: the point `(a, b)` is
/// `w0 + scale·(a·e1 + b·e2)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaneGrid {
    pub w0: Tensor,
    pub e1: Tensor,
    pub e2: Tensor,
    pub scale: f64,
    /// Coordinates of `w0`, `w_sgd`, `w_ff`.
    pub anchors: [(f64, f64); 3],
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    /// `loss[i][j]` at `(a_values[i], b_values[j])`.
    pub loss: Vec<Vec<f64>>,
}

impl PlaneGrid {
    pub fn point(&self, a: f64, b: f64) -> Result<Tensor> {
        self.w0.axpy(self.scale * a, &self.e1)?.axpy(self.scale * b, &self.e2)
    }

    /// Loss at arbitrary plane coordinates; not charged.
    pub fn evaluate_at(&self, model: &Model, test: &Batch, a: f64, b: f64) -> Result<f64> {
        let mut m = model.clone();
        m.restore_trainable(&self.point(a, b)?)?;
        m.loss(test)
    }

    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.a_values.iter().enumerate().flat_map(move |(i, &a)| {
            self.b_values
                .iter()
                .enumerate()
                .map(move |(j, &b)| (a, b, self.loss[i][j]))
        })
    }
}

fn axis(lo: f64, hi: f64, margin: f64, resolution: usize) -> Vec<f64> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (lo, hi) = (lo - margin * span, hi + margin * span);
    if resolution == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..resolution)
        .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
        .collect()
}

/// Grids the test loss over the plane spanned by `w_sgd − w0` and
/// `w_ff − w0`, extending `margin` (a fraction of the anchor span) beyond the
/// anchors on each side. Every cell is charged to `eval_forward`; the model's
/// weights are left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn loss_plane(
    model: &Model,
    w0: &Tensor,
    w_sgd: &Tensor,
    w_ff: &Tensor,
    resolution: usize,
    margin: f64,
    test: &Batch,
    ledger: &mut FlopsLedger,
) -> Result<PlaneGrid> {
    if resolution == 0 {
        return Err(Error::config("plane.resolution", "must be at least 1"));
    }
    if !(margin >= 0.0) {
        return Err(Error::config("plane.margin", "must be non-negative"));
    }
    let u = w_sgd.sub(w0)?;
    let v = w_ff.sub(w0)?;
    let (e1, e2) = gram_schmidt_plane(&u, &v)?;
    let scale = v.norm();

    let coords = |w: &Tensor| -> Result<(f64, f64)> {
        let d = w.sub(w0)?;
        Ok((d.dot(&e1)? / scale, d.dot(&e2)? / scale))
    };
    let anchors = [(0.0, 0.0), coords(w_sgd)?, coords(w_ff)?];
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
        anchors.iter().map(pick).fold(init, f)
    };
    let a_values = axis(
        fold(f64::min, f64::INFINITY, |p| p.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.0),
        margin,
        resolution,
    );
    let b_values = axis(
        fold(f64::min, f64::INFINITY, |p| p.1),
        fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        margin,
        resolution,
    );

    let mut grid = PlaneGrid {
        w0: w0.clone(),
        e1,
        e2,
        scale,
        anchors,
        a_values,
        b_values,
        loss: Vec::new(),
    };
    let mut scratch = model.clone();
    for &a in &grid.a_values {
        let mut row = Vec::with_capacity(resolution);
        for &b in &grid.b_values {
            scratch.restore_trainable(&grid.point(a, b)?)?;
            let e = scratch.evaluate(test)?;
            ledger.charge(Category::EvalForward, e.forward_flops);
            row.push(e.loss);
        }
        grid.loss.push(row);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::model::{Architecture, Param};

    fn two_param_model() -> (Model, Batch) {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Param::trainable(Tensor::zeros(&[2, 1])));
        let m = Model::new(Architecture::Regression { d: 2, k: 1 }, params).unwrap();
        let b = Batch::new(
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]),
            Tensor::from_rows(&[[1.0], [-1.0]]),
            None,
        )
        .unwrap();
        (m, b)
    }

    #[test]
    fn resolution_three_charges_nine_evaluations() {
        let (m, test) = two_param_model();
        let w0 = Tensor::vector(vec![0.0, 0.0]);
        let ws = Tensor::vector(vec![1.0, 0.0]);
        let wf = Tensor::vector(vec![0.5, 0.5]);
        let mut ledger = FlopsLedger::new();
        let g = loss_plane(&m, &w0, &ws, &wf, 3, 0.25, &test, &mut ledger).unwrap();
        assert_eq!(ledger.get(Category::EvalForward), 9 * m.forward_flops(&test));
        assert_eq!(g.cells().count(), 9);
        for (w, &(a, b)) in [&w0, &ws, &wf].into_iter().zip(&g.anchors) {
            let mut direct = m.clone();
            direct.restore_trainable(w).unwrap();
            let expect = direct.loss(&test).unwrap();
            assert!((g.evaluate_at(&m, &test, a, b).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_anchors_are_rejected() {
        let (m, test) = two_param_model();
        let w0 = Tensor::vector(vec![0.0, 0.0]);
        let r = loss_plane(
            &m,
            &w0,
            &Tensor::vector(vec![1.0, 1.0]),
            &Tensor::vector(vec![2.0, 2.0]),
            3,
            0.25,
            &test,
            &mut FlopsLedger::new(),
        );
        assert!(matches!(r, Err(Error::DegeneratePlane(_))));
    }
}
