//! Country trade graph: betweenness, modularity communities, community
//! violations and transshipment origin attribution.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::Write;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CountryCode, FlowDirection, TradeRecord};
use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("no records match the graph filter")]
    EmptyGraph,
    #[error("hub {0} has no declarations in the window")]
    UnknownHub(CountryCode),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which declarations contribute to edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    /// Export declarations only.
    Exports,
    /// Both sides; an import declaration adds to its exporter -> importer edge.
    #[default]
    Both,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphFilter {
    pub periods: Option<RangeInclusive<i32>>,
    /// HS code prefixes; empty matches everything.
    pub hs_prefixes: Vec<String>,
    pub source: EdgeSource,
}

impl GraphFilter {
    pub fn matches(&self, r: &TradeRecord) -> bool {
        if let Some(p) = &self.periods {
            if !p.contains(&r.period) {
                return false;
            }
        }
        if self.source == EdgeSource::Exports && r.flow != FlowDirection::Export {
            return false;
        }
        self.hs_prefixes.is_empty()
            || self
                .hs_prefixes
                .iter()
                .any(|p| r.hs_code.as_str().starts_with(p.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight_value: f64,
    pub weight_kg: f64,
}

/// Directed country graph. Node indices follow ascending country code.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeGraph {
    nodes: Vec<CountryCode>,
    index: BTreeMap<CountryCode, usize>,
    /// Sorted by `(from, to)`.
    edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl TradeGraph {
    pub fn from_edges(edges: BTreeMap<(CountryCode, CountryCode), (f64, f64)>) -> Self {
        let mut index = BTreeMap::new();
        for &(u, v) in edges.keys() {
            index.insert(u, 0);
            index.insert(v, 0);
        }
        let nodes: Vec<CountryCode> = index.keys().copied().collect();
        for (i, c) in nodes.iter().enumerate() {
            index.insert(*c, i);
        }
        let mut out_edges = vec![Vec::new(); nodes.len()];
        let mut in_edges = vec![Vec::new(); nodes.len()];
        let edges: Vec<Edge> = edges
            .into_iter()
            .enumerate()
            .map(|(e, ((u, v), (value, kg)))| {
                let (from, to) = (index[&u], index[&v]);
                out_edges[from].push(e);
                in_edges[to].push(e);
                Edge {
                    from,
                    to,
                    weight_value: value,
                    weight_kg: kg,
                }
            })
            .collect();
        Self {
            nodes,
            index,
            edges,
            out_edges,
            in_edges,
        }
    }

    pub fn nodes(&self) -> &[CountryCode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_index(&self, code: CountryCode) -> Option<usize> {
        self.index.get(&code).copied()
    }

    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.out_edges[node].iter().map(|&e| &self.edges[e])
    }

    pub fn in_edges(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.in_edges[node].iter().map(|&e| &self.edges[e])
    }

    pub fn edge(&self, from: CountryCode, to: CountryCode) -> Option<&Edge> {
        let (f, t) = (self.node_index(from)?, self.node_index(to)?);
        self.out_edges(f).find(|e| e.to == t)
    }

    /// Index of the synthetic Code-0 node, if present.
    pub fn ghost(&self) -> Option<usize> {
        self.node_index(CountryCode::UNSPECIFIED)
    }

    /// Total value on edges touching `node`, in either direction.
    pub fn strength(&self, node: usize) -> f64 {
        self.out_edges(node)
            .chain(self.in_edges(node))
            .map(|e| e.weight_value)
            .sum()
    }

    /// Undirected value-weighted adjacency, optionally without the ghost node.
    /// Neighbour lists are sorted by node index.
    pub fn undirected(&self, include_ghost: bool) -> Vec<Vec<(usize, f64)>> {
        let ghost = if include_ghost { None } else { self.ghost() };
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for e in &self.edges {
            if Some(e.from) == ghost || Some(e.to) == ghost || e.weight_value <= 0.0 {
                continue;
            }
            let key = (e.from.min(e.to), e.from.max(e.to));
            *merged.entry(key).or_default() += e.weight_value;
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for ((a, b), w) in merged {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n);
        }
        adj
    }
}

/// Aggregate records into exporter -> importer edges. Self-trade never
/// reaches here; Code-0 partners become edges to the ghost node.
pub fn build_graph(records: &[TradeRecord], filter: &GraphFilter) -> Result<TradeGraph, NetworkError> {
    let mut edges: BTreeMap<(CountryCode, CountryCode), (f64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| filter.matches(r)) {
        let (u, v) = r.exporter_importer();
        if u == v {
            continue;
        }
        let e = edges.entry((u, v)).or_default();
        e.0 += r.trade_value;
        e.1 += r.net_weight;
    }
    if edges.is_empty() {
        return Err(NetworkError::EmptyGraph);
    }
    Ok(TradeGraph::from_edges(edges))
}

/// Total-ordered distance for the Dijkstra heap (min-heap via reversed order).
#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Single-source dependency accumulation (Brandes). Returns `delta[v]`.
fn source_dependencies(adj: &[Vec<(usize, f64)>], s: usize, weighted: bool) -> Vec<f64> {
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut sigma = vec![0.0f64; n];
    let mut dist = vec![f64::INFINITY; n];
    sigma[s] = 1.0;
    dist[s] = 0.0;
    if weighted {
        let mut heap = BinaryHeap::new();
        let mut done = vec![false; n];
        heap.push(Frontier(0.0, s));
        while let Some(Frontier(d, v)) = heap.pop() {
            if done[v] || d > dist[v] {
                continue;
            }
            done[v] = true;
            order.push(v);
            for &(w, weight) in &adj[v] {
                let alt = d + 1.0 / weight;
                if alt < dist[w] {
                    dist[w] = alt;
                    sigma[w] = sigma[v];
                    preds[w].clear();
                    preds[w].push(v);
                    heap.push(Frontier(alt, w));
                } else if alt == dist[w] && !done[w] {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
    } else {
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &(w, _) in &adj[v] {
                if dist[w].is_infinite() {
                    dist[w] = dist[v] + 1.0;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1.0 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
    }
    let mut delta = vec![0.0; n];
    for &w in order.iter().rev() {
        for &v in &preds[w] {
            delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
        }
    }
    delta[s] = 0.0;
    delta
}

/// Shortest-path betweenness on the undirected projection, normalised by
/// `(n-1)(n-2)/2` over the participating nodes. Distance is `1/weight` when
/// `weighted`, hop count otherwise.
pub fn betweenness(graph: &TradeGraph, weighted: bool, include_ghost: bool) -> BTreeMap<CountryCode, f64> {
    let adj = graph.undirected(include_ghost);
    let ghost = if include_ghost { None } else { graph.ghost() };
    let members: Vec<usize> = (0..adj.len()).filter(|&i| Some(i) != ghost).collect();
    let partials: Vec<Vec<f64>> = members
        .par_iter()
        .map(|&s| source_dependencies(&adj, s, weighted))
        .collect();
    let mut total = vec![0.0; adj.len()];
    for p in &partials {
        for (t, d) in total.iter_mut().zip(p) {
            *t += d;
        }
    }
    let n = members.len() as f64;
    // Each unordered pair is counted from both ends.
    let norm = if members.len() > 2 { (n - 1.0) * (n - 2.0) } else { 0.0 };
    members
        .iter()
        .map(|&i| {
            let b = if norm > 0.0 { total[i] / norm } else { 0.0 };
            (graph.nodes[i], b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Community id per node; ids are dense and ordered by the smallest member code.
    pub community: BTreeMap<CountryCode, usize>,
    pub modularity_q: f64,
}

impl Partition {
    pub fn community_of(&self, code: CountryCode) -> Option<usize> {
        self.community.get(&code).copied()
    }

    pub fn community_count(&self) -> usize {
        self.community.values().max().map_or(0, |m| m + 1)
    }
}

/// `Q = sum_c (in_c / 2m - (tot_c / 2m)^2)` for an assignment on `adj`.
pub fn modularity(adj: &[Vec<(usize, f64)>], assignment: &[usize]) -> f64 {
    let two_m: f64 = adj.iter().flatten().map(|&(_, w)| w).sum();
    if two_m <= 0.0 {
        return 0.0;
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let mut inside = vec![0.0; k];
    let mut tot = vec![0.0; k];
    for (i, list) in adj.iter().enumerate() {
        for &(j, w) in list {
            tot[assignment[i]] += w;
            if assignment[i] == assignment[j] {
                inside[assignment[i]] += w;
            }
        }
    }
    inside
        .iter()
        .zip(&tot)
        .map(|(a, t)| a / two_m - (t / two_m).powi(2))
        .sum()
}

/// One level of local moves. `adj` may carry self-loops (aggregated
/// communities); those weights are counted once per direction already.
fn local_moves(adj: &[Vec<(usize, f64)>], order: &[usize]) -> (Vec<usize>, bool) {
    let n = adj.len();
    let degree: Vec<f64> = adj.iter().map(|l| l.iter().map(|&(_, w)| w).sum()).collect();
    let two_m: f64 = degree.iter().sum();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = degree.clone();
    let mut link = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut any_move = false;
    loop {
        let mut moved = false;
        for &i in order {
            let own = comm[i];
            for &(j, w) in &adj[i] {
                if j == i {
                    continue;
                }
                let c = comm[j];
                if !touched.contains(&c) {
                    touched.push(c);
                }
                link[c] += w;
            }
            tot[own] -= degree[i];
            let gain = |c: usize, link: &[f64], tot: &[f64]| link[c] - tot[c] * degree[i] / two_m;
            let mut best = own;
            let mut best_gain = gain(own, &link, &tot);
            for &c in &touched {
                let g = gain(c, &link, &tot);
                if g > best_gain + 1e-12 {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += degree[i];
            comm[i] = best;
            if best != own {
                moved = true;
                any_move = true;
            }
            for &c in &touched {
                link[c] = 0.0;
            }
            link[own] = 0.0;
            touched.clear();
        }
        if !moved {
            break;
        }
    }
    (comm, any_move)
}

/// Relabel to dense ids in order of first appearance.
fn renumber(comm: &mut [usize]) -> usize {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    for c in comm.iter_mut() {
        let id = *map.entry(*c).or_insert_with(|| {
            next += 1;
            next - 1
        });
        *c = id;
    }
    next
}

/// Multi-level greedy modularity maximisation on an undirected adjacency.
/// Node visit order at each level is a seeded shuffle.
pub fn louvain(adj: &[Vec<(usize, f64)>], seed: u64) -> Vec<usize> {
    let n = adj.len();
    let mut assignment: Vec<usize> = (0..n).collect();
    let two_m: f64 = adj.iter().flatten().map(|&(_, w)| w).sum();
    if two_m <= 0.0 {
        return assignment;
    }
    let mut rng = SeededRng::new(seed);
    let mut level = adj.to_vec();
    loop {
        let mut order: Vec<usize> = (0..level.len()).collect();
        rng.shuffle(&mut order);
        let (mut comm, moved) = local_moves(&level, &order);
        if !moved {
            break;
        }
        let k = renumber(&mut comm);
        for a in assignment.iter_mut() {
            *a = comm[*a];
        }
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, list) in level.iter().enumerate() {
            for &(j, w) in list {
                *merged.entry((comm[i], comm[j])).or_default() += w;
            }
        }
        let mut next = vec![Vec::new(); k];
        for ((a, b), w) in merged {
            next[a].push((b, w));
        }
        level = next;
    }
    assignment
}

/// Community partition of the undirected projection. The ghost node is left
/// out unless `include_ghost`.
pub fn detect_communities(graph: &TradeGraph, seed: u64, include_ghost: bool) -> Partition {
    let adj = graph.undirected(include_ghost);
    let ghost = if include_ghost { None } else { graph.ghost() };
    let mut assignment = louvain(&adj, seed);
    let q = modularity(&adj, &assignment);
    // Stable ids: order communities by their smallest member, dropping the ghost.
    let members: Vec<usize> = (0..adj.len()).filter(|&i| Some(i) != ghost).collect();
    let mut kept: Vec<usize> = members.iter().map(|&i| assignment[i]).collect();
    renumber(&mut kept);
    for (&i, &c) in members.iter().zip(&kept) {
        assignment[i] = c;
    }
    Partition {
        community: members.iter().map(|&i| (graph.nodes[i], assignment[i])).collect(),
        modularity_q: q,
    }
}

/// Per-edge violation: `weight / strength(exporter)` when the endpoints sit in
/// different communities (nodes outside the partition count as their own
/// community), else 0. Parallel to `graph.edges()`.
pub fn violation_scores(graph: &TradeGraph, partition: &Partition) -> Vec<f64> {
    let strength: Vec<f64> = (0..graph.nodes.len()).map(|i| graph.strength(i)).collect();
    graph
        .edges
        .iter()
        .map(|e| {
            let cu = partition.community_of(graph.nodes[e.from]);
            let cv = partition.community_of(graph.nodes[e.to]);
            let same = cu.is_some() && cu == cv;
            if same || strength[e.from] <= 0.0 {
                0.0
            } else {
                e.weight_value / strength[e.from]
            }
        })
        .collect()
}

/// Violation score of the edge carrying each record (0 when absent).
pub fn record_violations(graph: &TradeGraph, violations: &[f64], records: &[TradeRecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| {
            let (u, v) = r.exporter_importer();
            match (graph.node_index(u), graph.node_index(v)) {
                (Some(f), Some(t)) => graph.out_edges[f]
                    .iter()
                    .find(|&&e| graph.edges[e].to == t)
                    .map_or(0.0, |&e| violations[e]),
                _ => 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    Country(CountryCode),
    DomesticUnknown,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Country(c) => write!(f, "{c}"),
            Origin::DomesticUnknown => f.write_str("domestic/unknown"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadingAttribution {
    pub exports_kg: f64,
    pub imports_kg: f64,
    pub origins: BTreeMap<Origin, f64>,
}

/// Split a hub's own exports per HS-4 across the origins of its imports in
/// the same heading and window. Exports beyond imports go to
/// `DomesticUnknown`.
pub fn attribute_origins(
    records: &[TradeRecord],
    hub: CountryCode,
    window: RangeInclusive<i32>,
) -> Result<BTreeMap<String, HeadingAttribution>, NetworkError> {
    let mut imports: BTreeMap<String, BTreeMap<CountryCode, f64>> = BTreeMap::new();
    let mut exports: BTreeMap<String, f64> = BTreeMap::new();
    let mut seen = false;
    for r in records
        .iter()
        .filter(|r| r.reporter == hub && window.contains(&r.period))
    {
        seen = true;
        let heading = r.hs_code.heading().to_string();
        match r.flow {
            FlowDirection::Import => *imports.entry(heading).or_default().entry(r.partner).or_default() += r.net_weight,
            FlowDirection::Export => *exports.entry(heading).or_default() += r.net_weight,
        }
    }
    if !seen {
        return Err(NetworkError::UnknownHub(hub));
    }
    let mut out = BTreeMap::new();
    for (heading, exported) in exports {
        let sources = imports.remove(&heading).unwrap_or_default();
        let imported: f64 = sources.values().sum();
        let covered = exported.min(imported);
        let mut origins = BTreeMap::new();
        if imported > 0.0 {
            for (&origin, &kg) in &sources {
                origins.insert(Origin::Country(origin), covered * (kg / imported));
            }
        }
        if exported > covered {
            origins.insert(Origin::DomesticUnknown, exported - covered);
        }
        out.insert(
            heading,
            HeadingAttribution {
                exports_kg: exported,
                imports_kg: imported,
                origins,
            },
        );
    }
    Ok(out)
}

/// Origin totals over all headings.
pub fn origin_totals(by_heading: &BTreeMap<String, HeadingAttribution>) -> BTreeMap<Origin, f64> {
    let mut totals = BTreeMap::new();
    for h in by_heading.values() {
        for (o, kg) in &h.origins {
            *totals.entry(*o).or_default() += kg;
        }
    }
    totals
}

/// Hubs: nodes in the top `fraction` of betweenness (at least one), excluding zero scores.
pub fn top_hubs(centrality: &BTreeMap<CountryCode, f64>, fraction: f64) -> Vec<CountryCode> {
    let codes: Vec<CountryCode> = centrality.keys().copied().collect();
    let scores: Vec<f64> = centrality.values().copied().collect();
    let k = crate::stats::ceil_count(fraction, codes.len()).max(1);
    crate::stats::top_indices(&scores, k)
        .into_iter()
        .filter(|&i| scores[i] > 0.0)
        .map(|i| codes[i])
        .collect()
}

fn community_cell(p: &Partition, c: CountryCode) -> String {
    p.community_of(c).map(|id| id.to_string()).unwrap_or_default()
}

pub fn write_edges<W: Write>(
    graph: &TradeGraph,
    partition: &Partition,
    violations: &[f64],
    sink: W,
) -> Result<(), NetworkError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "u",
        "v",
        "weight_value",
        "weight_kg",
        "community_u",
        "community_v",
        "violation_score",
    ])?;
    for (e, s) in graph.edges.iter().zip(violations) {
        let (u, v) = (graph.nodes[e.from], graph.nodes[e.to]);
        w.write_record([
            u.to_string(),
            v.to_string(),
            e.weight_value.to_string(),
            e.weight_kg.to_string(),
            community_cell(partition, u),
            community_cell(partition, v),
            s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_nodes<W: Write>(
    graph: &TradeGraph,
    centrality: &BTreeMap<CountryCode, f64>,
    partition: &Partition,
    sink: W,
) -> Result<(), NetworkError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["country", "betweenness", "community", "strength_value", "ghost"])?;
    for (i, &c) in graph.nodes.iter().enumerate() {
        w.write_record([
            c.to_string(),
            centrality.get(&c).map(|b| b.to_string()).unwrap_or_default(),
            community_cell(partition, c),
            graph.strength(i).to_string(),
            c.is_unspecified().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_origins<W: Write>(
    attributions: &BTreeMap<CountryCode, BTreeMap<String, HeadingAttribution>>,
    sink: W,
) -> Result<(), NetworkError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "hub",
        "heading",
        "origin",
        "attributed_kg",
        "hub_exports_kg",
        "hub_imports_kg",
    ])?;
    for (hub, headings) in attributions {
        for (heading, a) in headings {
            for (origin, kg) in &a.origins {
                w.write_record([
                    hub.to_string(),
                    heading.clone(),
                    origin.to_string(),
                    kg.to_string(),
                    a.exports_kg.to_string(),
                    a.imports_kg.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::HsCode;
    use proptest::prelude::*;

    fn cc(c: u32) -> CountryCode {
        CountryCode(c)
    }

    fn graph(edges: &[(u32, u32, f64)]) -> TradeGraph {
        TradeGraph::from_edges(edges.iter().map(|&(u, v, w)| ((cc(u), cc(v)), (w, w))).collect())
    }

    fn rec(reporter: u32, partner: u32, flow: FlowDirection, kg: f64, hs: &str) -> TradeRecord {
        TradeRecord {
            record_id: format!("{reporter}-{partner}-{kg}"),
            period: 2022,
            reporter: cc(reporter),
            partner: cc(partner),
            flow,
            hs_code: HsCode::new(hs).unwrap(),
            net_weight: kg,
            trade_value: kg * 2.0,
        }
    }

    #[test]
    fn records_aggregate_into_one_edge() {
        let records = [
            rec(1, 2, FlowDirection::Export, 50.0, "760110"),
            rec(1, 2, FlowDirection::Export, 100.0, "760120"),
        ];
        let g = build_graph(&records, &GraphFilter::default()).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].weight_value, 300.0);
        assert_eq!(g.edges()[0].weight_kg, 150.0);
    }

    #[test]
    fn import_declarations_join_the_exporter_edge() {
        let records = [
            rec(1, 2, FlowDirection::Export, 50.0, "760110"),
            rec(2, 1, FlowDirection::Import, 40.0, "760110"),
        ];
        let g = build_graph(&records, &GraphFilter::default()).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edge(cc(1), cc(2)).unwrap().weight_kg, 90.0);
        let exports_only = GraphFilter {
            source: EdgeSource::Exports,
            ..GraphFilter::default()
        };
        assert_eq!(build_graph(&records, &exports_only).unwrap().edges()[0].weight_kg, 50.0);
    }

    #[test]
    fn unspecified_partner_becomes_ghost_node() {
        let g = build_graph(
            &[rec(826, 0, FlowDirection::Export, 10.0, "760110")],
            &GraphFilter::default(),
        )
        .unwrap();
        let ghost = g.ghost().unwrap();
        assert_eq!(g.nodes()[ghost], CountryCode::UNSPECIFIED);
        assert_eq!(g.in_edges(ghost).count(), 1);
    }

    #[test]
    fn empty_filter_is_an_error() {
        let filter = GraphFilter {
            periods: Some(1990..=1991),
            ..GraphFilter::default()
        };
        let r = build_graph(&[rec(1, 2, FlowDirection::Export, 1.0, "760110")], &filter);
        assert!(matches!(r, Err(NetworkError::EmptyGraph)));
        let by_hs = GraphFilter {
            hs_prefixes: vec!["7616".into()],
            ..GraphFilter::default()
        };
        assert!(build_graph(&[rec(1, 2, FlowDirection::Export, 1.0, "760110")], &by_hs).is_err());
    }

    #[test]
    fn path_graph_middle_is_the_bridge() {
        let g = graph(&[(1, 2, 1.0), (2, 3, 5.0)]);
        for weighted in [false, true] {
            let b = betweenness(&g, weighted, false);
            assert_eq!(b[&cc(1)], 0.0);
            assert_eq!(b[&cc(2)], 1.0);
            assert_eq!(b[&cc(3)], 0.0);
        }
    }

    #[test]
    fn complete_graph_has_no_intermediaries() {
        let mut edges = Vec::new();
        for u in 1..=4 {
            for v in (u + 1)..=4 {
                edges.push((u, v, 1.0));
            }
        }
        let b = betweenness(&graph(&edges), true, false);
        assert!(b.values().all(|&x| x == 0.0));
    }

    #[test]
    fn star_center_carries_every_pair() {
        let g = graph(&[(1, 2, 1.0), (1, 3, 2.0), (4, 1, 3.0), (1, 5, 1.0), (6, 1, 1.0)]);
        let b = betweenness(&g, true, false);
        assert_eq!(b[&cc(1)], 1.0);
        assert!((2..=6).all(|l| b[&cc(l)] == 0.0));
    }

    #[test]
    fn weighted_distance_prefers_heavy_links() {
        // 1-3 direct is light (distance 1), 1-2-3 is heavy (distance 0.2).
        let g = graph(&[(1, 3, 1.0), (1, 2, 10.0), (2, 3, 10.0)]);
        assert_eq!(betweenness(&g, true, false)[&cc(2)], 1.0);
        assert_eq!(betweenness(&g, false, false)[&cc(2)], 0.0);
    }

    #[test]
    fn split_shortest_paths_share_credit() {
        // Square 1-2-3-4-1: each corner lies on one of two shortest paths for
        // the opposite pair. Raw 0.5, normalised by (3*2)/2 = 3.
        let g = graph(&[(1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0), (4, 1, 1.0)]);
        let b = betweenness(&g, false, false);
        for c in 1..=4 {
            assert!((b[&cc(c)] - 0.5 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ghost_is_excluded_from_centrality() {
        let g = graph(&[(1, 0, 1.0), (2, 0, 1.0)]);
        assert!(!betweenness(&g, true, false).contains_key(&cc(0)));
        assert_eq!(betweenness(&g, true, true)[&cc(0)], 1.0);
    }

    #[test]
    fn two_triangles_split_cleanly() {
        let g = graph(&[
            (1, 2, 1.0),
            (2, 3, 1.0),
            (1, 3, 1.0),
            (4, 5, 1.0),
            (5, 6, 1.0),
            (4, 6, 1.0),
        ]);
        let p = detect_communities(&g, 7, false);
        assert!((p.modularity_q - 0.5).abs() < 1e-12);
        assert_eq!(p.community_count(), 2);
        assert_eq!(p.community_of(cc(1)), p.community_of(cc(3)));
        assert_ne!(p.community_of(cc(1)), p.community_of(cc(4)));
    }

    #[test]
    fn single_edge_is_one_community() {
        let p = detect_communities(&graph(&[(1, 2, 4.0)]), 1, false);
        assert_eq!(p.community_count(), 1);
        assert_eq!(p.modularity_q, 0.0);
    }

    #[test]
    fn zero_weight_graph_is_degenerate() {
        let p = detect_communities(&graph(&[(1, 2, 0.0), (2, 3, 0.0)]), 1, false);
        assert_eq!(p.community_count(), 3);
        assert_eq!(p.modularity_q, 0.0);
    }

    fn nmi(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
        let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_default() += 1.0 / n;
            *pa.entry(x).or_default() += 1.0 / n;
            *pb.entry(y).or_default() += 1.0 / n;
        }
        let h = |p: &BTreeMap<usize, f64>| -p.values().map(|v| v * v.ln()).sum::<f64>();
        let mi: f64 = joint.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum();
        2.0 * mi / (h(&pa) + h(&pb))
    }

    #[test]
    fn planted_blocks_are_recovered() {
        let mut rng = SeededRng::new(2024);
        let (blocks, size) = (4, 20);
        let mut edges = Vec::new();
        for u in 0..blocks * size {
            for v in (u + 1)..blocks * size {
                let p = if u / size == v / size { 0.9 } else { 0.05 };
                if rng.uniform() < p {
                    edges.push((u as u32 + 1, v as u32 + 1, 1.0));
                }
            }
        }
        let g = graph(&edges);
        let p = detect_communities(&g, 3, false);
        let truth: Vec<usize> = g.nodes().iter().map(|c| (c.0 as usize - 1) / size).collect();
        let found: Vec<usize> = g.nodes().iter().map(|&c| p.community_of(c).unwrap()).collect();
        assert!(nmi(&truth, &found) >= 0.9, "nmi {}", nmi(&truth, &found));
        assert!(p.modularity_q > 0.5);
    }

    #[test]
    fn communities_are_seed_deterministic() {
        let g = graph(&[
            (1, 2, 1.0),
            (2, 3, 2.0),
            (3, 4, 1.0),
            (4, 5, 3.0),
            (5, 1, 1.0),
            (2, 5, 1.0),
        ]);
        assert_eq!(detect_communities(&g, 11, false), detect_communities(&g, 11, false));
    }

    #[test]
    fn violations_follow_strength_ratio() {
        // Node 1 has three equal edges; only 1->4 crosses communities.
        let g = graph(&[(1, 2, 1.0), (1, 3, 1.0), (1, 4, 1.0), (2, 3, 1.0)]);
        let partition = Partition {
            community: [(cc(1), 0), (cc(2), 0), (cc(3), 0), (cc(4), 1)].into_iter().collect(),
            modularity_q: 0.0,
        };
        let v = violation_scores(&g, &partition);
        let crossing = g.edges().iter().position(|e| g.nodes()[e.to] == cc(4)).unwrap();
        for (i, s) in v.iter().enumerate() {
            if i == crossing {
                assert!((s - 1.0 / 3.0).abs() < 1e-15);
            } else {
                assert_eq!(*s, 0.0);
            }
        }
    }

    #[test]
    fn lone_crossing_edge_scores_one() {
        let g = graph(&[(1, 2, 5.0)]);
        let partition = Partition {
            community: [(cc(1), 0), (cc(2), 1)].into_iter().collect(),
            modularity_q: 0.0,
        };
        assert_eq!(violation_scores(&g, &partition), vec![1.0]);
        let together = Partition {
            community: [(cc(1), 0), (cc(2), 0)].into_iter().collect(),
            modularity_q: 0.0,
        };
        assert_eq!(violation_scores(&g, &together), vec![0.0]);
    }

    #[test]
    fn ghost_edges_always_cross() {
        let g = graph(&[(1, 2, 3.0), (1, 0, 1.0)]);
        let p = detect_communities(&g, 0, false);
        let v = violation_scores(&g, &p);
        let ghost_edge = g.edges().iter().position(|e| g.nodes()[e.to] == cc(0)).unwrap();
        assert_eq!(v[ghost_edge], 0.25);
    }

    fn hub_records(imports: &[(u32, f64)], exports: f64) -> Vec<TradeRecord> {
        let mut out: Vec<TradeRecord> = imports
            .iter()
            .map(|&(from, kg)| rec(702, from, FlowDirection::Import, kg, "760410"))
            .collect();
        out.push(rec(702, 840, FlowDirection::Export, exports, "760429"));
        out
    }

    #[test]
    fn single_source_takes_everything() {
        let a = attribute_origins(&hub_records(&[(156, 100.0)], 50.0), cc(702), 2022..=2022).unwrap();
        assert_eq!(
            origin_totals(&a),
            [(Origin::Country(cc(156)), 50.0)].into_iter().collect()
        );
    }

    #[test]
    fn attribution_is_proportional() {
        let a = attribute_origins(&hub_records(&[(156, 75.0), (392, 25.0)], 100.0), cc(702), 2022..=2022).unwrap();
        let t = origin_totals(&a);
        assert_eq!(t[&Origin::Country(cc(156))], 75.0);
        assert_eq!(t[&Origin::Country(cc(392))], 25.0);
    }

    #[test]
    fn excess_exports_are_residue() {
        let a = attribute_origins(&hub_records(&[(156, 100.0)], 120.0), cc(702), 2022..=2022).unwrap();
        let t = origin_totals(&a);
        assert_eq!(t[&Origin::Country(cc(156))], 100.0);
        assert_eq!(t[&Origin::DomesticUnknown], 20.0);
    }

    #[test]
    fn absent_hub_is_an_error() {
        let r = attribute_origins(&hub_records(&[(156, 1.0)], 1.0), cc(702), 2010..=2011);
        assert!(matches!(r, Err(NetworkError::UnknownHub(_))));
    }

    proptest! {
        #[test]
        fn attribution_conserves_mass(
            imports in prop::collection::vec((1u32..50, 0.0f64..1e6), 0..8),
            exports in 0.0f64..2e6,
        ) {
            let a = attribute_origins(&hub_records(&imports, exports), cc(702), 2022..=2022).unwrap();
            let h = &a["7604"];
            let total: f64 = h.origins.values().sum();
            prop_assert!((total - exports).abs() <= 1e-9 * exports.max(1.0));
        }

        #[test]
        fn leaves_have_zero_betweenness(edges in prop::collection::vec((1u32..12, 1u32..12, 0.1f64..10.0), 1..30)) {
            let edges: Vec<_> = edges.into_iter().filter(|(u, v, _)| u != v).collect();
            prop_assume!(!edges.is_empty());
            let g = graph(&edges);
            let adj = g.undirected(false);
            let b = betweenness(&g, true, false);
            for (i, list) in adj.iter().enumerate() {
                if list.len() == 1 {
                    prop_assert_eq!(b[&g.nodes()[i]], 0.0);
                }
            }
            prop_assert!(b.values().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        }

        #[test]
        fn returned_partition_beats_trivial(edges in prop::collection::vec((1u32..15, 1u32..15, 0.1f64..10.0), 1..40), seed in 0u64..100) {
            let edges: Vec<_> = edges.into_iter().filter(|(u, v, _)| u != v).collect();
            prop_assume!(!edges.is_empty());
            let p = detect_communities(&graph(&edges), seed, false);
            prop_assert!(p.modularity_q >= -1e-12);
            prop_assert!(p.modularity_q <= 1.0);
        }
    }
}
