//! Bus-branch case ingestion.
//!
//! Two text formats are understood: the MATPOWER `mpc.*` matrix subset and a
//! canonical JSON form. Only the columns the DC model needs are kept (bus id,
//! bus type, area; branch endpoints, reactance, status). Everything else is
//! parsed positionally and dropped.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub type BusId = u32;

/// MATPOWER bus type code of the reference bus.
pub const REF_BUS_TYPE: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub area: u32,
}

/// A transmission branch with susceptance `b = 1/x` in per unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub b: f64,
}

/// Validated bus-branch model.
///
/// Buses are sorted by id, branch endpoints are stored with `from < to` and
/// branches are sorted by endpoint pair. Parallel branches are merged by
/// summing susceptances, so at most one branch joins any pair of buses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCase {
    base_mva: f64,
    slack: BusId,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
}

impl GridCase {
    pub fn new(base_mva: f64, slack: BusId, buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(Error::Validation(format!("base MVA must be positive, got {base_mva}")));
        }
        let mut buses = buses;
        buses.sort_by_key(|b| b.id);
        if let Some(w) = buses.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Validation(format!("duplicate bus id {}", w[0].id)));
        }
        if buses.is_empty() {
            return Err(Error::Validation("case has no buses".into()));
        }
        let declared = |id: BusId| buses.binary_search_by_key(&id, |b| b.id).is_ok();
        if !declared(slack) {
            return Err(Error::Validation(format!("slack bus {slack} is not declared")));
        }

        let mut merged: BTreeMap<(BusId, BusId), f64> = BTreeMap::new();
        for br in &branches {
            if br.from == br.to {
                return Err(Error::Validation(format!("self-loop at bus {}", br.from)));
            }
            for end in [br.from, br.to] {
                if !declared(end) {
                    return Err(Error::Validation(format!("branch endpoint {end} is not a declared bus")));
                }
            }
            if !(br.b.is_finite() && br.b > 0.0) {
                return Err(Error::Validation(format!(
                    "branch {}-{} has non-positive or non-finite susceptance {}",
                    br.from, br.to, br.b
                )));
            }
            let key = (br.from.min(br.to), br.from.max(br.to));
            *merged.entry(key).or_insert(0.0) += br.b;
        }
        let branches: Vec<Branch> = merged
            .into_iter()
            .map(|((from, to), b)| Branch { from, to, b })
            .collect();

        let case = GridCase { base_mva, slack, buses, branches };
        if !case.is_connected() {
            return Err(Error::Validation("branch graph is not connected".into()));
        }
        Ok(case)
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn slack(&self) -> BusId {
        self.slack
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_ids(&self) -> Vec<BusId> {
        self.buses.iter().map(|b| b.id).collect()
    }

    /// Position of `id` in the sorted bus list.
    pub fn index_of(&self, id: BusId) -> Option<usize> {
        self.buses.binary_search_by_key(&id, |b| b.id).ok()
    }

    pub fn slack_index(&self) -> usize {
        self.index_of(self.slack).expect("slack validated at construction")
    }

    /// Neighbor lists by bus position.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for br in &self.branches {
            let (i, j) = (self.index_of(br.from).unwrap(), self.index_of(br.to).unwrap());
            adj[i].push(j);
            adj[j].push(i);
        }
        for nbrs in &mut adj {
            nbrs.sort_unstable();
        }
        adj
    }

    pub fn are_adjacent(&self, a: BusId, b: BusId) -> bool {
        let key = (a.min(b), a.max(b));
        self.branches
            .binary_search_by(|br| (br.from, br.to).cmp(&key))
            .is_ok()
    }

    /// Returns a copy with areas reassigned from `areas` (buses not in the map keep theirs).
    pub fn with_areas(&self, areas: &BTreeMap<BusId, u32>) -> GridCase {
        let mut out = self.clone();
        for bus in &mut out.buses {
            if let Some(&a) = areas.get(&bus.id) {
                bus.area = a;
            }
        }
        out
    }

    fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == adj.len()
    }
}

/// The IEEE 14-bus test case shipped with the crate.
pub fn ieee14() -> GridCase {
    parse_matpower_case(include_str!("../data/case14.m")).expect("bundled case14 parses")
}

/// The IEEE 30-bus test case shipped with the crate.
pub fn ieee30() -> GridCase {
    parse_matpower_case(include_str!("../data/case30.m")).expect("bundled case30 parses")
}

/// Resolves `ieee14` / `ieee30` to the bundled cases, anything else to a file
/// path (`.json` is read as canonical JSON, everything else as MATPOWER).
pub fn load_case(spec: &str) -> Result<GridCase> {
    match spec {
        "ieee14" => Ok(ieee14()),
        "ieee30" => Ok(ieee30()),
        path => {
            let text = std::fs::read_to_string(path)?;
            if path.ends_with(".json") {
                from_canonical_json(&text)
            } else {
                parse_matpower_case(&text)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// MATPOWER subset
// ---------------------------------------------------------------------------

struct MatrixBlock {
    start_line: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

/// Parses the `mpc.baseMVA`, `mpc.bus` and `mpc.branch` blocks of a MATPOWER
/// case file. Other `mpc.*` assignments and non-assignment lines are skipped.
pub fn parse_matpower_case(text: &str) -> Result<GridCase> {
    let mut base_mva: Option<f64> = None;
    let mut blocks: BTreeMap<String, MatrixBlock> = BTreeMap::new();

    // (name, block) of an open `[ ... ]` block; `skip_cell` tracks `{ ... }`.
    let mut open: Option<(String, MatrixBlock)> = None;
    let mut skip_cell = false;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = strip_comment(raw).trim();

        if skip_cell {
            if line.contains('}') {
                skip_cell = false;
            }
            continue;
        }

        if let Some((name, mut block)) = open.take() {
            match line.find(']') {
                Some(end) => {
                    push_rows(&mut block, &line[..end], line_no)?;
                    check_trailer(&line[end + 1..], line_no)?;
                    blocks.insert(name, block);
                }
                None => {
                    push_rows(&mut block, line, line_no)?;
                    open = Some((name, block));
                }
            }
            continue;
        }

        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some((name, rhs)) = rest.split_once('=') else {
            return Err(Error::parse(line_no, "expected `=` after mpc field name"));
        };
        let name = name.trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::parse(line_no, format!("invalid field name `{name}`")));
        }
        let rhs = rhs.trim();

        if let Some(body) = rhs.strip_prefix('[') {
            let mut block = MatrixBlock { start_line: line_no, rows: Vec::new() };
            match body.find(']') {
                Some(end) => {
                    push_rows(&mut block, &body[..end], line_no)?;
                    check_trailer(&body[end + 1..], line_no)?;
                    blocks.insert(name.to_string(), block);
                }
                None => {
                    push_rows(&mut block, body, line_no)?;
                    open = Some((name.to_string(), block));
                }
            }
        } else if rhs.starts_with('{') {
            skip_cell = !rhs.contains('}');
        } else if name == "baseMVA" {
            let value = rhs.trim_end_matches(';').trim();
            let v: f64 = value
                .parse()
                .map_err(|_| Error::parse(line_no, format!("baseMVA `{value}` is not a number")))?;
            base_mva = Some(v);
        }
    }

    if let Some((name, block)) = open {
        return Err(Error::parse(
            block.start_line,
            format!("block mpc.{name} is not terminated by `]`"),
        ));
    }

    let base_mva =
        base_mva.ok_or_else(|| Error::parse(last_line, "missing mpc.baseMVA"))?;
    let bus_block = blocks
        .get("bus")
        .ok_or_else(|| Error::parse(last_line, "missing mpc.bus block"))?;
    let branch_block = blocks
        .get("branch")
        .ok_or_else(|| Error::parse(last_line, "missing mpc.branch block"))?;

    let mut buses = Vec::with_capacity(bus_block.rows.len());
    let mut slack: Option<BusId> = None;
    for (line, row) in &bus_block.rows {
        if row.len() < 2 {
            return Err(Error::parse(*line, "bus row needs at least 2 columns (id, type)"));
        }
        let id = bus_id(row[0], *line)?;
        let kind = integer(row[1], *line, "bus type")?;
        let area = match row.get(6) {
            Some(&a) => u32::try_from(integer(a, *line, "area")?)
                .map_err(|_| Error::parse(*line, "area must be a non-negative integer"))?,
            None => 1,
        };
        if kind == REF_BUS_TYPE {
            match slack {
                None => slack = Some(id),
                Some(prev) => {
                    log::warn!("multiple reference buses ({prev}, {id}); using {}", prev.min(id));
                    slack = Some(prev.min(id));
                }
            }
        }
        buses.push(Bus { id, area });
    }
    // A uniform area column carries no partition information.
    if let Some(first) = buses.first().map(|b| b.area) {
        if buses.iter().all(|b| b.area == first) {
            buses.iter_mut().for_each(|b| b.area = 1);
        }
    }

    let mut branches = Vec::with_capacity(branch_block.rows.len());
    for (line, row) in &branch_block.rows {
        if row.len() < 4 {
            return Err(Error::parse(*line, "branch row needs at least 4 columns (from, to, r, x)"));
        }
        if let Some(&status) = row.get(10) {
            if status == 0.0 {
                continue;
            }
        }
        let from = bus_id(row[0], *line)?;
        let to = bus_id(row[1], *line)?;
        let x = row[3];
        if x == 0.0 {
            return Err(Error::Validation(format!(
                "branch {from}-{to} (line {line}) has zero reactance"
            )));
        }
        branches.push(Branch { from, to, b: 1.0 / x });
    }

    let slack = slack.ok_or_else(|| Error::Validation("no reference bus (type 3)".into()))?;
    GridCase::new(base_mva, slack, buses, branches)
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn check_trailer(rest: &str, line_no: usize) -> Result<()> {
    let rest = rest.trim();
    if rest.is_empty() || rest == ";" {
        Ok(())
    } else {
        Err(Error::parse(line_no, format!("unexpected `{rest}` after `]`")))
    }
}

fn push_rows(block: &mut MatrixBlock, content: &str, line_no: usize) -> Result<()> {
    for chunk in content.split(';') {
        let mut row = Vec::new();
        for tok in chunk.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(line_no, format!("`{tok}` is not a number")))?;
            row.push(v);
        }
        if row.is_empty() {
            continue;
        }
        if let Some((_, first)) = block.rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    line_no,
                    format!("row has {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        block.rows.push((line_no, row));
    }
    Ok(())
}

fn integer(v: f64, line: usize, what: &str) -> Result<i64> {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15 {
        Ok(v as i64)
    } else {
        Err(Error::parse(line, format!("{what} `{v}` is not an integer")))
    }
}

fn bus_id(v: f64, line: usize) -> Result<BusId> {
    let n = integer(v, line, "bus id")?;
    match BusId::try_from(n) {
        Ok(id) if id >= 1 => Ok(id),
        _ => Err(Error::parse(line, format!("bus id {n} out of range"))),
    }
}

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

/// Serializes to the canonical JSON form (sorted buses, sorted branch pairs).
pub fn to_canonical_json(case: &GridCase) -> String {
    serde_json::to_string_pretty(case).expect("GridCase serialization is infallible")
}

pub fn from_canonical_json(text: &str) -> Result<GridCase> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::schema("<root>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::schema("<root>", "expected an object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "base_mva" | "slack" | "buses" | "branches") {
            return Err(Error::schema(key.clone(), "unknown field"));
        }
    }

    let base_mva = field_f64(obj, "base_mva", "base_mva")?;
    let slack = field_id(obj, "slack", "slack")?;

    let buses = field(obj, "buses", "buses")?
        .as_array()
        .ok_or_else(|| Error::schema("buses", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(k, item)| {
            let path = format!("buses[{k}]");
            let o = item
                .as_object()
                .ok_or_else(|| Error::schema(path.clone(), "expected an object"))?;
            Ok(Bus {
                id: field_id(o, "id", &format!("{path}.id"))?,
                area: field_u32(o, "area", &format!("{path}.area"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let branches = field(obj, "branches", "branches")?
        .as_array()
        .ok_or_else(|| Error::schema("branches", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(k, item)| {
            let path = format!("branches[{k}]");
            let o = item
                .as_object()
                .ok_or_else(|| Error::schema(path.clone(), "expected an object"))?;
            Ok(Branch {
                from: field_id(o, "from", &format!("{path}.from"))?,
                to: field_id(o, "to", &format!("{path}.to"))?,
                b: field_f64(o, "b", &format!("{path}.b"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    GridCase::new(base_mva, slack, buses, branches)
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::schema(path, "missing required field"))
}

fn field_f64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<f64> {
    field(obj, key, path)?
        .as_f64()
        .ok_or_else(|| Error::schema(path, "expected a number"))
}

fn field_u32(obj: &Map<String, Value>, key: &str, path: &str) -> Result<u32> {
    field(obj, key, path)?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| Error::schema(path, "expected a non-negative 32-bit integer"))
}

fn field_id(obj: &Map<String, Value>, key: &str, path: &str) -> Result<BusId> {
    match field_u32(obj, key, path)? {
        0 => Err(Error::schema(path, "bus ids start at 1")),
        id => Ok(id),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0 0 0 1;
    2 1 0 0 0 0 1;
];
mpc.branch = [
    1 2 0.01 0.25 0 0 0 0 0 0 1;
];
";

    #[test]
    fn two_bus_susceptance_is_reciprocal_reactance() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        assert_eq!(case.num_buses(), 2);
        assert_eq!(case.branches().len(), 1);
        assert_eq!(case.branches()[0].b, 4.0);
        assert_eq!(case.slack(), 1);
    }

    #[test]
    fn parallel_branches_merge() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3; 2 1];\nmpc.branch = [1 2 0 0.5; 2 1 0 0.5];";
        let case = parse_matpower_case(text).unwrap();
        assert_eq!(case.branches().len(), 1);
        assert_eq!(case.branches()[0], Branch { from: 1, to: 2, b: 4.0 });
    }

    #[test]
    fn out_of_service_branches_dropped() {
        let text = "mpc.baseMVA = 100;
mpc.bus = [1 3; 2 1; 3 1];
mpc.branch = [
  1 2 0 0.5 0 0 0 0 0 0 1;
  2 3 0 0.5 0 0 0 0 0 0 1;
  1 3 0 0.5 0 0 0 0 0 0 0;
];";
        let case = parse_matpower_case(text).unwrap();
        assert_eq!(case.branches().len(), 2);
        assert!(!case.are_adjacent(1, 3));
    }

    #[test]
    fn zero_reactance_is_validation_error() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3; 2 1];\nmpc.branch = [1 2 0 0];";
        assert!(matches!(parse_matpower_case(text), Err(Error::Validation(_))));
    }

    #[test]
    fn disconnected_graph_rejected() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3; 2 1; 3 1];\nmpc.branch = [1 2 0 0.1];";
        let err = parse_matpower_case(text).unwrap_err();
        assert!(err.to_string().contains("not connected"), "{err}");
    }

    #[test]
    fn missing_reference_bus_rejected() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 2; 2 1];\nmpc.branch = [1 2 0 0.1];";
        assert!(matches!(parse_matpower_case(text), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_token_reports_line() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [\n 1 3;\n 2 x;\n];\nmpc.branch = [1 2 0 0.1];";
        match parse_matpower_case(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_branch_row_reports_line() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3; 2 1];\nmpc.branch = [\n1 2 0;\n];";
        match parse_matpower_case(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unterminated_block_rejected() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3; 2 1;\nmpc.branch = [1 2 0 0.1];";
        assert!(matches!(parse_matpower_case(text), Err(Error::Parse { .. })));
    }

    #[test]
    fn distinct_areas_are_kept() {
        let text = "mpc.baseMVA = 100;
mpc.bus = [1 3 0 0 0 0 1; 2 1 0 0 0 0 1; 3 1 0 0 0 0 2];
mpc.branch = [1 2 0 0.1; 2 3 0 0.1];";
        let case = parse_matpower_case(text).unwrap();
        let areas: Vec<u32> = case.buses().iter().map(|b| b.area).collect();
        assert_eq!(areas, vec![1, 1, 2]);
    }

    #[test]
    fn uniform_area_collapses_to_one() {
        let text = "mpc.baseMVA = 100;
mpc.bus = [1 3 0 0 0 0 4; 2 1 0 0 0 0 4];
mpc.branch = [1 2 0 0.1];";
        let case = parse_matpower_case(text).unwrap();
        assert!(case.buses().iter().all(|b| b.area == 1));
    }

    #[test]
    fn bundled_cases_have_expected_sizes() {
        let c14 = ieee14();
        assert_eq!(c14.num_buses(), 14);
        assert_eq!(c14.branches().len(), 20);
        assert_eq!(c14.slack(), 1);
        let c30 = ieee30();
        assert_eq!(c30.num_buses(), 30);
        assert_eq!(c30.branches().len(), 41);
        let json = to_canonical_json(&c30);
        let v: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["buses"].as_array().unwrap().len(), 30);
    }

    #[test]
    fn json_round_trip_is_identity() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        let back = from_canonical_json(&to_canonical_json(&case)).unwrap();
        assert_eq!(case, back);
    }

    #[test]
    fn json_missing_slack_names_field() {
        let text = r#"{"base_mva": 100, "buses": [{"id":1,"area":1}], "branches": []}"#;
        match from_canonical_json(text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "slack"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_bad_branch_field_is_named() {
        let text = r#"{"base_mva": 100, "slack": 1,
            "buses": [{"id":1,"area":1},{"id":2,"area":1}],
            "branches": [{"from":1,"to":2,"b":"x"}]}"#;
        match from_canonical_json(text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "branches[0].b"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
