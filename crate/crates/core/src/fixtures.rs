//! Small named instances used by tests, examples and the CLI.

use nalgebra::{DMatrix, DVector};

use crate::problem::{CostModel, CsProblem, NoiseModel, TerminalSpec};
use crate::system::LtvNetwork;
use crate::topology::SystemGraph;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

/// Two scalar subsystems coupled both ways, horizon 2.
pub fn tiny2() -> CsProblem {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, 0.2, 1.1]);
    let net = LtvNetwork::time_invariant(vec![(1, 1); 2], 2, a, DMatrix::identity(2, 2)).expect("tiny2 network");
    let graph = SystemGraph::undirected(2, [(0, 1)]).expect("tiny2 graph");
    let noise = NoiseModel::new(
        DVector::from_vec(vec![1.0, -0.5]),
        diag(&[0.5, 0.3]),
        vec![DMatrix::identity(2, 2) * 0.1; 2],
    )
    .expect("tiny2 noise");
    let cost = CostModel::time_invariant(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.1, 2).expect("tiny2 cost");
    let terminal = TerminalSpec::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[0.12, 0.01, 0.01, 0.13]))
        .expect("tiny2 terminal");
    CsProblem::new(net, graph, noise, cost, terminal, 1).expect("tiny2 problem")
}

/// Three scalar subsystems on a path, horizon 3, one-hop locality so the
/// two ends may not react to each other.
pub fn path3() -> CsProblem {
    let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.4, 0.9, 0.5, 0.0, 0.6, 1.05]);
    let net = LtvNetwork::time_invariant(vec![(1, 1); 3], 3, a, DMatrix::identity(3, 3)).expect("path3 network");
    let noise = NoiseModel::new(
        DVector::from_vec(vec![1.0, -1.0, 0.5]),
        diag(&[0.4, 0.3, 0.5]),
        vec![DMatrix::identity(3, 3) * 0.05; 3],
    )
    .expect("path3 noise");
    let cost = CostModel::time_invariant(DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 0.2, 3).expect("path3 cost");
    let sigma_f = DMatrix::from_row_slice(3, 3, &[0.065, 0.005, 0.0, 0.005, 0.06, 0.005, 0.0, 0.005, 0.065]);
    let terminal = TerminalSpec::new(DVector::zeros(3), sigma_f).expect("path3 terminal");
    CsProblem::new(net, SystemGraph::path(3), noise, cost, terminal, 1).expect("path3 problem")
}
