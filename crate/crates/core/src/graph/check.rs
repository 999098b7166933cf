//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs in f64 only: central differences at single precision are dominated
//! by rounding noise and cannot certify anything.

use super::{GradStore, Graph, LeafKind, NodeId, Op, Values};
use crate::{Error, Result};

/// Per-leaf verdict. The error is `|analytic - fd| / max(|analytic|, |fd|, floor)`
/// maximized over elements. The floor is scale-aware,
/// `max(1e-5, 1e-2 * gmax)` with `gmax` the largest gradient magnitude in the
/// tensor, so truncation noise on components far below the tensor's gradient
/// scale does not read as disagreement while real per-component errors still do.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_err(&self) -> f64 {
        self.worst().map(|e| e.max_rel_err).unwrap_or(0.0)
    }
}

const REL_FLOOR: f64 = 1e-5;

/// Compare analytic gradients of `output` against central differences with
/// step `h`, for every leaf in `check` (all params if `check` is empty).
/// Leaves must already be bound in `values`.
pub fn grad_check(
    graph: &Graph<f64>,
    values: &mut Values<f64>,
    output: NodeId,
    check: &[NodeId],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let targets: Vec<NodeId> = if check.is_empty() {
        graph.leaves_of(LeafKind::Param).into_iter().map(|(_, id)| id).collect()
    } else {
        check.to_vec()
    };
    for &id in &targets {
        if !matches!(graph.node(id).op, Op::Leaf(_)) {
            return Err(Error::Graph(format!("grad_check target {} is not a leaf", graph.node_name(id))));
        }
    }

    values.reset_computed(graph);
    graph.forward(values)?;
    let mut grads = GradStore::new(graph);
    graph.backward(values, output, &mut grads)?;

    let mut entries = Vec::with_capacity(targets.len());
    for &id in &targets {
        let n = values.value(id).numel();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };

        let mut fd = Vec::with_capacity(n);
        for i in 0..n {
            let orig = values.value(id).data()[i];
            let f_plus = eval_at(graph, values, output, id, i, orig + h)?;
            let f_minus = eval_at(graph, values, output, id, i, orig - h)?;
            values.get_mut(id).data_mut()[i] = orig;
            fd.push((f_plus - f_minus) / (2.0 * h));
        }
        // Leave the graph evaluated at the unperturbed point.
        values.reset_computed(graph);
        graph.forward(values)?;

        let gmax = analytic
            .iter()
            .chain(fd.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let floor = REL_FLOOR.max(1e-2 * gmax);
        let mut worst = 0.0f64;
        let mut worst_index = 0usize;
        for i in 0..n {
            let denom = analytic[i].abs().max(fd[i].abs()).max(floor);
            let err = (analytic[i] - fd[i]).abs() / denom;
            if err > worst {
                worst = err;
                worst_index = i;
            }
        }
        entries.push(GradCheckEntry { name: graph.node_name(id).to_string(), max_rel_err: worst, worst_index });
    }
    Ok(GradCheckReport { entries, tolerance })
}

fn eval_at(
    graph: &Graph<f64>,
    values: &mut Values<f64>,
    output: NodeId,
    leaf: NodeId,
    index: usize,
    value: f64,
) -> Result<f64> {
    values.get_mut(leaf).data_mut()[index] = value;
    values.reset_computed(graph);
    graph.forward(values)?;
    Ok(values.value(output).item())
}
