//! Feeder topology and the linearized grid model's path matrices.
//!
//! A feeder is a rooted tree: one slack bus holding a fixed voltage and
//! `n` load/generation buses, each with exactly one path to the root.
//! The resistance matrix entry `R[i][j]` (and likewise `X`) is the sum
//! of line resistances over the lines shared by the root paths of buses
//! `i` and `j`. Both matrices are symmetric and, as long as every line
//! has strictly positive reactance, `X` is positive definite.

mod file;

pub use file::ParseError;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

/// External bus identifier as used in network files and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Voltage/power base pair; the impedance base is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnitBase {
    pub v_base_kv: f64,
    pub s_base_kva: f64,
}

impl PerUnitBase {
    pub fn new(v_base_kv: f64, s_base_kva: f64) -> Result<Self, NetworkError> {
        if !(v_base_kv > 0.0) || !v_base_kv.is_finite() {
            return Err(NetworkError::BadValue(format!(
                "voltage base must be positive and finite, got {v_base_kv}"
            )));
        }
        if !(s_base_kva > 0.0) || !s_base_kva.is_finite() {
            return Err(NetworkError::BadValue(format!(
                "power base must be positive and finite, got {s_base_kva}"
            )));
        }
        Ok(Self { v_base_kv, s_base_kva })
    }

    /// Impedance base in ohms, `v_base^2 / s_base`.
    pub fn z_base_ohm(&self) -> f64 {
        let v = self.v_base_kv * 1e3;
        let s = self.s_base_kva * 1e3;
        v * v / s
    }

    pub fn impedance_to_pu(&self, ohm: f64) -> f64 {
        ohm / self.z_base_ohm()
    }

    pub fn impedance_to_ohm(&self, pu: f64) -> f64 {
        pu * self.z_base_ohm()
    }

    pub fn power_to_pu(&self, mva: f64) -> f64 {
        mva * 1e3 / self.s_base_kva
    }

    pub fn power_to_mva(&self, pu: f64) -> f64 {
        pu * self.s_base_kva / 1e3
    }
}

/// Distribution line between two buses, impedance in per-unit.
///
/// Orientation is as declared in the source data; the tree direction is
/// recovered during network validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
}

/// Non-slack bus with its peak load, real generation, and, when an
/// inverter is present, the reactive capability interval.
///
/// All quantities are per-unit. `load_p`/`load_q` are consumption at
/// peak (scaled by a scenario's load multiplier before use), `gen_p` is
/// the real-power operating point of the local generator, and
/// `q_limits = (q_min, q_max)` with `q_min < 0 < q_max` marks a
/// controllable bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub load_p: f64,
    pub load_q: f64,
    pub gen_p: f64,
    pub q_limits: Option<(f64, f64)>,
}

impl Bus {
    pub fn passive(id: BusId) -> Self {
        Bus { id, load_p: 0.0, load_q: 0.0, gen_p: 0.0, q_limits: None }
    }

    pub fn is_control(&self) -> bool {
        self.q_limits.is_some()
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(BusId, BusId),
    #[error("line from bus {0} to itself")]
    SelfLoop(BusId),
    #[error("line references undeclared bus {0}")]
    DanglingBus(BusId),
    #[error("network is not radial: {0}")]
    NonRadial(String),
    #[error("line {from}-{to} has invalid impedance r={r}, x={x}; need r >= 0 and x > 0")]
    BadImpedance { from: BusId, to: BusId, r: f64, x: f64 },
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("invalid value: {0}")]
    BadValue(String),
}

/// Radial feeder: slack bus plus validated tree of load buses.
///
/// Construction checks that impedances are valid, that every line
/// endpoint is declared, and that the line set forms a spanning tree
/// rooted at the slack bus. Parent/depth bookkeeping is computed once
/// here and reused by the power flow and matrix builders.
#[derive(Debug, Clone)]
pub struct FeederNetwork {
    base: PerUnitBase,
    slack: BusId,
    v0: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    index: BTreeMap<BusId, usize>,
    parent_bus: Vec<Option<usize>>,
    parent_line: Vec<usize>,
    depth: Vec<usize>,
    topo: Vec<usize>,
}

impl FeederNetwork {
    pub fn new(
        base: PerUnitBase,
        slack: BusId,
        v0: f64,
        mut buses: Vec<Bus>,
        lines: Vec<Line>,
    ) -> Result<Self, NetworkError> {
        if !(v0 > 0.0) || !v0.is_finite() {
            return Err(NetworkError::BadValue(format!(
                "slack voltage must be positive and finite, got {v0}"
            )));
        }
        buses.sort_by_key(|b| b.id);
        let mut index = BTreeMap::new();
        for (i, bus) in buses.iter().enumerate() {
            if bus.id == slack {
                return Err(NetworkError::DuplicateBus(slack));
            }
            if index.insert(bus.id, i).is_some() {
                return Err(NetworkError::DuplicateBus(bus.id));
            }
            for v in [bus.load_p, bus.load_q, bus.gen_p] {
                if !v.is_finite() || v < 0.0 {
                    return Err(NetworkError::BadValue(format!(
                        "bus {}: loads and generation must be finite and non-negative",
                        bus.id
                    )));
                }
            }
            if let Some((lo, hi)) = bus.q_limits {
                if !(lo.is_finite() && hi.is_finite() && lo < 0.0 && hi > 0.0) {
                    return Err(NetworkError::BadValue(format!(
                        "bus {}: reactive limits must satisfy q_min < 0 < q_max, got ({lo}, {hi})",
                        bus.id
                    )));
                }
            }
        }

        let mut seen_pairs = BTreeMap::new();
        for line in &lines {
            if line.from == line.to {
                return Err(NetworkError::SelfLoop(line.from));
            }
            for end in [line.from, line.to] {
                if end != slack && !index.contains_key(&end) {
                    return Err(NetworkError::DanglingBus(end));
                }
            }
            if !(line.r.is_finite() && line.x.is_finite() && line.r >= 0.0 && line.x > 0.0) {
                return Err(NetworkError::BadImpedance {
                    from: line.from,
                    to: line.to,
                    r: line.r,
                    x: line.x,
                });
            }
            let key = if line.from < line.to { (line.from, line.to) } else { (line.to, line.from) };
            if seen_pairs.insert(key, ()).is_some() {
                return Err(NetworkError::DuplicateLine(key.0, key.1));
            }
        }

        if lines.len() != buses.len() {
            return Err(NetworkError::NonRadial(format!(
                "{} lines for {} non-slack buses; a tree needs exactly one line per bus",
                lines.len(),
                buses.len()
            )));
        }

        // Breadth-first sweep from the slack bus orients the tree.
        let n = buses.len();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        let slot = |id: BusId| -> usize {
            if id == slack {
                n
            } else {
                index[&id]
            }
        };
        for (li, line) in lines.iter().enumerate() {
            let a = slot(line.from);
            let b = slot(line.to);
            adjacency[a].push((b, li));
            adjacency[b].push((a, li));
        }

        let mut parent_bus = vec![None; n];
        let mut parent_line = vec![usize::MAX; n];
        let mut depth = vec![0usize; n];
        let mut topo = Vec::with_capacity(n);
        let mut visited = vec![false; n + 1];
        visited[n] = true;
        let mut queue = std::collections::VecDeque::from([n]);
        while let Some(u) = queue.pop_front() {
            for &(w, li) in &adjacency[u] {
                if visited[w] {
                    continue;
                }
                visited[w] = true;
                parent_bus[w] = if u == n { None } else { Some(u) };
                parent_line[w] = li;
                depth[w] = if u == n { 1 } else { depth[u] + 1 };
                topo.push(w);
                queue.push_back(w);
            }
        }
        if topo.len() != n {
            let missing: Vec<String> = buses
                .iter()
                .enumerate()
                .filter(|(i, _)| !visited[*i])
                .map(|(_, b)| b.id.to_string())
                .collect();
            return Err(NetworkError::NonRadial(format!(
                "buses {{{}}} have no path to the slack bus",
                missing.join(", ")
            )));
        }

        Ok(Self {
            base,
            slack,
            v0,
            buses,
            lines,
            index,
            parent_bus,
            parent_line,
            depth,
            topo,
        })
    }

    pub fn base(&self) -> PerUnitBase {
        self.base
    }

    pub fn slack(&self) -> BusId {
        self.slack
    }

    /// Slack bus voltage magnitude in per-unit.
    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Number of non-slack buses.
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Non-slack buses in ascending id order; this is also the row
    /// order of every vector and matrix derived from the network.
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn bus_ids(&self) -> Vec<BusId> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn index_of(&self, id: BusId) -> Result<usize, NetworkError> {
        self.index.get(&id).copied().ok_or(NetworkError::UnknownBus(id))
    }

    pub fn bus(&self, id: BusId) -> Result<&Bus, NetworkError> {
        self.index_of(id).map(|i| &self.buses[i])
    }

    /// Buses carrying an inverter with reactive capability.
    pub fn control_buses(&self) -> Vec<BusId> {
        self.buses.iter().filter(|b| b.is_control()).map(|b| b.id).collect()
    }

    /// Bus indices ordered root-outward (parents before children).
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Parent bus index, `None` when the parent is the slack bus.
    pub fn parent_of(&self, bus_index: usize) -> Option<usize> {
        self.parent_bus[bus_index]
    }

    /// Index into `lines()` of the line joining a bus to its parent.
    pub fn parent_line_of(&self, bus_index: usize) -> usize {
        self.parent_line[bus_index]
    }

    pub fn depth_of(&self, bus_index: usize) -> usize {
        self.depth[bus_index]
    }

    /// Lines on the unique path from the slack bus to `id`, in
    /// root-to-bus order.
    pub fn path_to_root(&self, id: BusId) -> Result<Vec<&Line>, NetworkError> {
        let mut rev = Vec::new();
        let mut cursor = Some(self.index_of(id)?);
        while let Some(i) = cursor {
            rev.push(&self.lines[self.parent_line[i]]);
            cursor = self.parent_bus[i];
        }
        rev.reverse();
        Ok(rev)
    }

    /// Builds the full resistance and reactance path matrices.
    ///
    /// Entry `(i, j)` sums the per-unit line impedances over the common
    /// part of the two root paths, i.e. the path from the root to the
    /// deepest common ancestor of buses `i` and `j`.
    pub fn build_impedance_matrices(&self) -> ImpedanceMatrices {
        let n = self.n();
        let mut cum_r = vec![0.0; n];
        let mut cum_x = vec![0.0; n];
        for &i in &self.topo {
            let line = &self.lines[self.parent_line[i]];
            let (pr, px) = match self.parent_bus[i] {
                Some(p) => (cum_r[p], cum_x[p]),
                None => (0.0, 0.0),
            };
            cum_r[i] = pr + line.r;
            cum_x[i] = px + line.x;
        }

        let mut r = DMatrix::zeros(n, n);
        let mut x = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let a = self.common_ancestor(i, j);
                let (cr, cx) = match a {
                    Some(k) => (cum_r[k], cum_x[k]),
                    None => (0.0, 0.0),
                };
                r[(i, j)] = cr;
                r[(j, i)] = cr;
                x[(i, j)] = cx;
                x[(j, i)] = cx;
            }
        }
        ImpedanceMatrices { r, x, order: self.bus_ids() }
    }

    /// Deepest common ancestor among non-slack buses; `None` when the
    /// paths only meet at the slack bus.
    fn common_ancestor(&self, mut a: usize, mut b: usize) -> Option<usize> {
        while self.depth[a] > self.depth[b] {
            a = self.parent_bus[a]?;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent_bus[b]?;
        }
        while a != b {
            a = self.parent_bus[a]?;
            b = self.parent_bus[b]?;
        }
        Some(a)
    }

    /// Parses the versioned feeder file format (see the bundled
    /// `sce42.toml` for a complete example) and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self, ParseError> {
        file::parse_network(text)
    }
}

/// Full path matrices with the bus order their rows refer to.
#[derive(Debug, Clone)]
pub struct ImpedanceMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub order: Vec<BusId>,
}

impl ImpedanceMatrices {
    /// Principal submatrix of the reactance matrix on `subset`, in the
    /// order the subset is given.
    pub fn x_effective(&self, subset: &[BusId]) -> Result<DMatrix<f64>, NetworkError> {
        effective_submatrix(&self.x, &self.order, subset)
    }

    pub fn r_effective(&self, subset: &[BusId]) -> Result<DMatrix<f64>, NetworkError> {
        effective_submatrix(&self.r, &self.order, subset)
    }
}

/// Principal submatrix of `matrix` (rows ordered per `order`) on the
/// given bus subset.
pub fn effective_submatrix(
    matrix: &DMatrix<f64>,
    order: &[BusId],
    subset: &[BusId],
) -> Result<DMatrix<f64>, NetworkError> {
    let pos = |id: BusId| -> Result<usize, NetworkError> {
        order.iter().position(|&b| b == id).ok_or(NetworkError::UnknownBus(id))
    };
    let idx: Vec<usize> = subset.iter().map(|&b| pos(b)).collect::<Result<_, _>>()?;
    let m = idx.len();
    let mut out = DMatrix::zeros(m, m);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            out[(a, b)] = matrix[(i, j)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(from: u32, to: u32, r: f64, x: f64) -> Line {
        Line { from: BusId(from), to: BusId(to), r, x }
    }

    fn chain3() -> FeederNetwork {
        // slack 0 - bus 1 - bus 2 with x = 0.2, 0.3
        FeederNetwork::new(
            PerUnitBase::new(1.0, 1000.0).unwrap(),
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1)), Bus::passive(BusId(2))],
            vec![line(0, 1, 0.1, 0.2), line(1, 2, 0.15, 0.3)],
        )
        .unwrap()
    }

    #[test]
    fn impedance_base_matches_table_value() {
        let base = PerUnitBase::new(12.35, 1000.0).unwrap();
        assert_relative_eq!(base.z_base_ohm(), 152.5225, max_relative = 1e-12);
        // published rounded base agrees to 0.1%
        assert!((base.z_base_ohm() - 152.52).abs() / 152.52 < 1e-3);
        assert_relative_eq!(base.impedance_to_pu(0.259), 0.259 / 152.5225, max_relative = 1e-12);
        assert!((base.impedance_to_pu(0.259) - 1.698e-3).abs() < 1e-6);
    }

    #[test]
    fn per_unit_round_trip() {
        let base = PerUnitBase::new(12.35, 1000.0).unwrap();
        for ohm in [0.015, 0.259, 0.808, 152.52] {
            assert_relative_eq!(base.impedance_to_ohm(base.impedance_to_pu(ohm)), ohm, max_relative = 1e-12);
        }
        for mva in [0.07, 1.34, 10.3] {
            assert_relative_eq!(base.power_to_mva(base.power_to_pu(mva)), mva, max_relative = 1e-12);
        }
    }

    #[test]
    fn chain_reactance_matrix() {
        let net = chain3();
        let m = net.build_impedance_matrices();
        // shared path of buses 1 and 2 is the single line 0-1
        let expect = [[0.2, 0.2], [0.2, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(m.x[(i, j)], expect[i][j], max_relative = 1e-14);
            }
        }
        let expect_r = [[0.1, 0.1], [0.1, 0.25]];
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(m.r[(i, j)], expect_r[i][j], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn star_paths_are_disjoint() {
        let net = FeederNetwork::new(
            PerUnitBase::new(1.0, 1000.0).unwrap(),
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1)), Bus::passive(BusId(2))],
            vec![line(0, 1, 0.1, 0.2), line(0, 2, 0.1, 0.4)],
        )
        .unwrap();
        let m = net.build_impedance_matrices();
        assert_relative_eq!(m.x[(0, 0)], 0.2);
        assert_relative_eq!(m.x[(1, 1)], 0.4);
        assert_eq!(m.x[(0, 1)], 0.0);
        assert_eq!(m.x[(1, 0)], 0.0);
    }

    #[test]
    fn path_to_root_ordering() {
        let net = chain3();
        let path = net.path_to_root(BusId(2)).unwrap();
        assert_eq!(path.len(), 2);
        assert_eq!((path[0].from, path[0].to), (BusId(0), BusId(1)));
        assert_eq!((path[1].from, path[1].to), (BusId(1), BusId(2)));
    }

    #[test]
    fn effective_submatrix_picks_rows() {
        let net = chain3();
        let m = net.build_impedance_matrices();
        let sub = m.x_effective(&[BusId(2)]).unwrap();
        assert_eq!(sub.nrows(), 1);
        assert_relative_eq!(sub[(0, 0)], 0.5);
        let err = m.x_effective(&[BusId(9)]).unwrap_err();
        assert!(matches!(err, NetworkError::UnknownBus(BusId(9))));
    }

    #[test]
    fn rejects_disconnected_network() {
        let err = FeederNetwork::new(
            PerUnitBase::new(1.0, 1000.0).unwrap(),
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1)), Bus::passive(BusId(2)), Bus::passive(BusId(3))],
            vec![line(0, 1, 0.1, 0.2), line(2, 3, 0.1, 0.2), line(3, 2, 0.2, 0.1)],
        )
        .unwrap_err();
        match err {
            NetworkError::DuplicateLine(a, b) => {
                assert_eq!((a, b), (BusId(2), BusId(3)));
            }
            other => panic!("expected duplicate line, got {other}"),
        }

        let err = FeederNetwork::new(
            PerUnitBase::new(1.0, 1000.0).unwrap(),
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1)), Bus::passive(BusId(2)), Bus::passive(BusId(3))],
            vec![line(0, 1, 0.1, 0.2), line(1, 2, 0.1, 0.2), line(2, 3, 0.2, 0.1), line(3, 1, 0.2, 0.1)],
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::NonRadial(_)), "cycle must be rejected: {err}");

        let err = FeederNetwork::new(
            PerUnitBase::new(1.0, 1000.0).unwrap(),
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1))],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::NonRadial(_)), "isolated bus must be rejected: {err}");
    }

    #[test]
    fn rejects_bad_lines() {
        let base = PerUnitBase::new(1.0, 1000.0).unwrap();
        let err = FeederNetwork::new(
            base,
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1))],
            vec![line(0, 1, 0.1, 0.0)],
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::BadImpedance { .. }), "x = 0 must be rejected");

        let err = FeederNetwork::new(
            base,
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1))],
            vec![line(0, 2, 0.1, 0.2)],
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::DanglingBus(BusId(2))));

        let err = FeederNetwork::new(
            base,
            BusId(0),
            1.0,
            vec![Bus::passive(BusId(1))],
            vec![line(1, 1, 0.1, 0.2)],
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::SelfLoop(BusId(1))));
    }
}
