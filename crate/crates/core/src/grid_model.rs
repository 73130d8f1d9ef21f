//! Susceptance matrix, DC power flow and graph utilities over a [`GridCase`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::case_io::{BusId, GridCase};
use crate::error::{Error, Result};

/// Injections must sum to zero within this tolerance.
pub const BALANCE_TOL: f64 = 1e-9;

/// Undirected edge set keyed by bus id, each pair stored as `(low, high)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeSet(BTreeSet<(BusId, BusId)>);

impl EdgeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `{a, b}`; self-loops are ignored and return `false`.
    pub fn insert(&mut self, a: BusId, b: BusId) -> bool {
        a != b && self.0.insert((a.min(b), a.max(b)))
    }

    pub fn contains(&self, a: BusId, b: BusId) -> bool {
        self.0.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (BusId, BusId)> + '_ {
        self.0.iter().copied()
    }

    /// Size of the symmetric difference.
    pub fn symmetric_difference_len(&self, other: &EdgeSet) -> usize {
        self.0.symmetric_difference(&other.0).count()
    }

    /// Edges with both endpoints in `ids`.
    pub fn restrict(&self, ids: &[BusId]) -> EdgeSet {
        let keep: BTreeSet<BusId> = ids.iter().copied().collect();
        self.iter()
            .filter(|(a, b)| keep.contains(a) && keep.contains(b))
            .collect()
    }

    pub fn is_subset(&self, other: &EdgeSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl FromIterator<(BusId, BusId)> for EdgeSet {
    fn from_iter<I: IntoIterator<Item = (BusId, BusId)>>(iter: I) -> Self {
        let mut set = EdgeSet::new();
        for (a, b) in iter {
            set.insert(a, b);
        }
        set
    }
}

/// The nodal susceptance matrix `B` (which is also the DC measurement matrix `H`)
/// and its slack-reduced form.
#[derive(Debug, Clone)]
pub struct SusceptanceMatrix {
    full: DMatrix<f64>,
    reduced: DMatrix<f64>,
    bus_ids: Vec<BusId>,
    slack: usize,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl SusceptanceMatrix {
    pub fn full(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn reduced(&self) -> &DMatrix<f64> {
        &self.reduced
    }

    pub fn bus_ids(&self) -> &[BusId] {
        &self.bus_ids
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    pub fn num_buses(&self) -> usize {
        self.bus_ids.len()
    }

    /// Number of statistical variables (non-slack buses).
    pub fn num_vars(&self) -> usize {
        self.bus_ids.len() - 1
    }

    /// Non-slack bus ids in variable order.
    pub fn var_ids(&self) -> Vec<BusId> {
        self.bus_ids
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != self.slack)
            .map(|(_, &id)| id)
            .collect()
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.bus_ids.binary_search(&id).ok()
    }

    /// Variable position of a non-slack bus.
    pub fn var_index(&self, id: BusId) -> Option<usize> {
        let k = self.bus_index(id)?;
        match k.cmp(&self.slack) {
            std::cmp::Ordering::Less => Some(k),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(k - 1),
        }
    }

    /// Bus position of a variable.
    pub fn bus_of_var(&self, v: usize) -> usize {
        if v < self.slack {
            v
        } else {
            v + 1
        }
    }

    /// Inserts a zero at the slack position.
    pub fn expand(&self, vars: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.num_buses(), |k, _| match k.cmp(&self.slack) {
            std::cmp::Ordering::Less => vars[k],
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => vars[k - 1],
        })
    }

    /// Measurement matrix restricted to the non-slack state: `B[:, vars]`.
    pub fn measurement_matrix(&self) -> DMatrix<f64> {
        self.full.clone().remove_column(self.slack)
    }

    /// Solves `B_r X = rhs` column by column.
    pub fn solve_reduced(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let chol = self
            .chol
            .as_ref()
            .ok_or_else(|| Error::Singular("reduced susceptance matrix".into()))?;
        Ok(chol.solve(rhs))
    }

    pub fn reduced_cholesky(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.chol.as_ref()
    }
}

pub fn build_susceptance_matrix(case: &GridCase) -> SusceptanceMatrix {
    let p = case.num_buses();
    let mut full = DMatrix::zeros(p, p);
    for br in case.branches() {
        let i = case.index_of(br.from).expect("validated endpoint");
        let j = case.index_of(br.to).expect("validated endpoint");
        full[(i, j)] -= br.b;
        full[(j, i)] -= br.b;
        full[(i, i)] += br.b;
        full[(j, j)] += br.b;
    }
    let slack = case.slack_index();
    let reduced = full.clone().remove_row(slack).remove_column(slack);
    let chol = Cholesky::new(reduced.clone());
    SusceptanceMatrix { full, reduced, bus_ids: case.bus_ids(), slack, chol }
}

/// DC power flow: angles with the slack fixed at zero.
pub fn solve_angles(b: &SusceptanceMatrix, injections: &DVector<f64>) -> Result<DVector<f64>> {
    if injections.len() != b.num_buses() {
        return Err(Error::Dimension { expected: b.num_buses(), got: injections.len() });
    }
    let total = injections.sum();
    if !total.is_finite() || total.abs() > BALANCE_TOL {
        return Err(Error::Unbalanced(total));
    }
    let rhs = injections.clone().remove_row(b.slack_index());
    let x = b.solve_reduced(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
    Ok(b.expand(&x.column(0).into_owned()))
}

/// All-pairs hop distances by breadth-first search, indexed by bus position.
pub fn hop_distances(case: &GridCase) -> DMatrix<usize> {
    let adj = case.adjacency();
    let p = adj.len();
    let mut d = DMatrix::from_element(p, p, usize::MAX);
    for s in 0..p {
        d[(s, s)] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if d[(s, v)] == usize::MAX {
                    d[(s, v)] = d[(s, u)] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    d
}

/// Branch adjacency as an [`EdgeSet`].
pub fn topology_edges(case: &GridCase) -> EdgeSet {
    case.branches().iter().map(|br| (br.from, br.to)).collect()
}

/// One area of a decentralized deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubNetwork {
    pub area_id: u32,
    /// Area buses with no out-of-area neighbor.
    pub interior: Vec<BusId>,
    /// Area buses adjacent to at least one out-of-area bus.
    pub border: Vec<BusId>,
    /// Area buses plus the out-of-area neighbors of border buses.
    pub augmented: Vec<BusId>,
    /// Branches with both endpoints in `augmented`.
    pub edges: EdgeSet,
}

impl SubNetwork {
    pub fn buses(&self) -> Vec<BusId> {
        let mut all: Vec<BusId> = self.interior.iter().chain(&self.border).copied().collect();
        all.sort_unstable();
        all
    }

    /// Augmented buses other than `slack`, i.e. the area's statistical variables.
    pub fn variables(&self, slack: BusId) -> Vec<BusId> {
        self.augmented.iter().copied().filter(|&id| id != slack).collect()
    }
}

pub fn partition_areas(case: &GridCase) -> Vec<SubNetwork> {
    let adj = case.adjacency();
    let buses = case.buses();
    let topo = topology_edges(case);
    let mut by_area: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, bus) in buses.iter().enumerate() {
        by_area.entry(bus.area).or_default().push(k);
    }
    by_area
        .into_iter()
        .map(|(area_id, members)| {
            let mut interior = Vec::new();
            let mut border = Vec::new();
            let mut augmented: BTreeSet<BusId> = members.iter().map(|&k| buses[k].id).collect();
            for &k in &members {
                let outside: Vec<usize> =
                    adj[k].iter().copied().filter(|&v| buses[v].area != area_id).collect();
                if outside.is_empty() {
                    interior.push(buses[k].id);
                } else {
                    border.push(buses[k].id);
                    augmented.extend(outside.iter().map(|&v| buses[v].id));
                }
            }
            let augmented: Vec<BusId> = augmented.into_iter().collect();
            let edges = topo.restrict(&augmented);
            SubNetwork { area_id, interior, border, augmented, edges }
        })
        .collect()
}
