//! Multilayer brain-connectivity graphs.
//!
//! Each frequency band yields a dense connectivity matrix over the regions of
//! a [`RegionAtlas`]. Rewiring sparsifies a band into a [`LayerGraph`] that
//! keeps the `k` spatially nearest neighbours of every region, the strongest
//! functional connections above a percentile, and one self-loop per region.
//! Layers over the same regions are then stacked into a [`MultilayerGraph`]
//! joined by replica edges.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("atlas: {0}")]
    Atlas(String),
    #[error("connectivity matrix ({band}): {detail}")]
    Matrix { band: Band, detail: String },
    #[error("k = {k} must satisfy 1 <= k < V = {vertices}")]
    InvalidK { k: usize, vertices: usize },
    #[error("percentile {0} must lie strictly between 0 and 100")]
    InvalidPercentile(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {0} outside the NIHSS range 1..=42")]
    InvalidLabel(i64),
    #[error("unknown band label `{0}`")]
    UnknownBand(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// EEG frequency bands, in ascending frequency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Delta,
    Theta,
    Alpha1,
    Alpha2,
    Beta1,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::Delta, Band::Theta, Band::Alpha1, Band::Alpha2, Band::Beta1];
    /// Default layer set: α1, α2, β1.
    pub const DEFAULT_LAYERS: [Band; 3] = [Band::Alpha1, Band::Alpha2, Band::Beta1];

    pub fn label(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha1 => "alpha1",
            Band::Alpha2 => "alpha2",
            Band::Beta1 => "beta1",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Band {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self> {
        Band::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| GraphError::UnknownBand(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub position: [f64; 3],
}

/// Ordered list of regions with 3-D coordinates. Region order defines the
/// vertex index used everywhere else and breaks distance ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AtlasFile", into = "AtlasFile")]
pub struct RegionAtlas {
    regions: Vec<Region>,
}

#[derive(Serialize, Deserialize)]
struct AtlasFile {
    regions: Vec<Region>,
}

impl TryFrom<AtlasFile> for RegionAtlas {
    type Error = GraphError;
    fn try_from(f: AtlasFile) -> Result<Self> {
        RegionAtlas::new(f.regions)
    }
}

impl From<RegionAtlas> for AtlasFile {
    fn from(a: RegionAtlas) -> Self {
        AtlasFile { regions: a.regions }
    }
}

// (label, inclination from vertex in degrees, azimuth from nasion in degrees,
// positive towards the left ear).
const MONTAGE_31: [(&str, f64, f64); 31] = [
    ("fp1", 90.0, 18.0),
    ("fp2", 90.0, -18.0),
    ("afz", 67.0, 0.0),
    ("f7", 90.0, 54.0),
    ("f3", 62.0, 40.0),
    ("fz", 45.0, 0.0),
    ("f4", 62.0, -40.0),
    ("f8", 90.0, -54.0),
    ("fc5", 71.0, 69.0),
    ("fc1", 32.0, 45.0),
    ("fc2", 32.0, -45.0),
    ("fc6", 71.0, -69.0),
    ("t7", 90.0, 90.0),
    ("c3", 45.0, 90.0),
    ("cz", 0.0, 0.0),
    ("c4", 45.0, -90.0),
    ("t8", 90.0, -90.0),
    ("cp5", 71.0, 111.0),
    ("cp1", 32.0, 135.0),
    ("cp2", 32.0, -135.0),
    ("cp6", 71.0, -111.0),
    ("p7", 90.0, 126.0),
    ("p3", 62.0, 140.0),
    ("pz", 45.0, 180.0),
    ("p4", 62.0, -140.0),
    ("p8", 90.0, -126.0),
    ("po3", 75.0, 157.0),
    ("po4", 75.0, -157.0),
    ("o1", 90.0, 162.0),
    ("oz", 90.0, 180.0),
    ("o2", 90.0, -162.0),
];

impl RegionAtlas {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        if regions.is_empty() {
            return Err(GraphError::Atlas("atlas has no regions".into()));
        }
        let mut seen = HashSet::new();
        for r in &regions {
            if !seen.insert(r.id.as_str()) {
                return Err(GraphError::Atlas(format!("duplicate region id `{}`", r.id)));
            }
            if r.position.iter().any(|c| !c.is_finite()) {
                return Err(GraphError::Atlas(format!("region `{}` has a non-finite coordinate", r.id)));
            }
        }
        Ok(Self { regions })
    }

    /// 31-region scalp montage on the unit sphere.
    pub fn default_31() -> Self {
        let regions = MONTAGE_31
            .iter()
            .map(|&(id, incl, azim)| {
                let (t, p) = (incl.to_radians(), azim.to_radians());
                Region {
                    id: id.to_string(),
                    position: [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()],
                }
            })
            .collect();
        Self { regions }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.regions[a].position, self.regions[b].position);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }
}

/// Symmetric band connectivity (LLC) matrix with zero diagonal and entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    band: Band,
    size: usize,
    values: Vec<f64>,
}

impl ConnectivityMatrix {
    pub fn new(band: Band, size: usize, values: Vec<f64>) -> Result<Self> {
        let bad = |detail: String| GraphError::Matrix { band, detail };
        if size == 0 || values.len() != size * size {
            return Err(bad(format!("{} values for a {size}x{size} matrix", values.len())));
        }
        for i in 0..size {
            if values[i * size + i] != 0.0 {
                return Err(bad(format!("non-zero diagonal at {i}")));
            }
            for j in 0..size {
                let v = values[i * size + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("entry ({i},{j}) = {v} outside [0, 1]")));
                }
                if (v - values[j * size + i]).abs() > 1e-9 {
                    return Err(bad(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { band, size, values })
    }

    pub fn zeros(band: Band, size: usize) -> Self {
        Self {
            band,
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn band(&self) -> Band {
        self.band
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Off-diagonal upper-triangle entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.size;
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Structural,
    Functional,
    SelfLoop,
    Both,
}

/// Undirected edge `u ≤ v` of a band layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerEdge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub band: Band,
    pub num_vertices: usize,
    /// Sorted by `(u, v)`; self-loops included.
    pub edges: Vec<LayerEdge>,
    /// Non-self-loop edges kept, as a fraction of `V(V−1)/2`.
    pub retention_ratio: f64,
}

impl LayerGraph {
    pub fn edge_set(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().map(|e| (e.u, e.v)).collect()
    }

    /// Sum of incident edge weights per vertex, self-loop included once.
    pub fn strengths(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.num_vertices];
        for e in &self.edges {
            s[e.u] += e.weight;
            if e.u != e.v {
                s[e.v] += e.weight;
            }
        }
        s
    }
}

/// Edge between the replicas of `vertex` in two layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterLayerEdge {
    pub vertex: usize,
    pub layer_a: usize,
    pub layer_b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Replica in layer `i` links to the replica in layer `i + 1`.
    #[default]
    AdjacentReplica,
    /// Every pair of layers is linked replica-to-replica.
    AllPairsReplica,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilayerGraph {
    pub layers: Vec<LayerGraph>,
    pub inter: Vec<InterLayerEdge>,
}

impl MultilayerGraph {
    pub fn num_vertices(&self) -> usize {
        self.layers[0].num_vertices
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Replica index of `vertex` in `layer` within the flattened node set.
    pub fn replica(&self, layer: usize, vertex: usize) -> usize {
        layer * self.num_vertices() + vertex
    }

    pub fn num_replicas(&self) -> usize {
        self.num_vertices() * self.num_layers()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSample {
    pub patient_id: String,
    pub hospital_id: String,
    pub label: u8,
    pub graph: MultilayerGraph,
}

impl PatientSample {
    pub fn new(patient_id: impl Into<String>, hospital_id: impl Into<String>, label: i64, graph: MultilayerGraph) -> Result<Self> {
        if !(1..=42).contains(&label) {
            return Err(GraphError::InvalidLabel(label));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            hospital_id: hospital_id.into(),
            label: label as u8,
            graph,
        })
    }
}

/// Union over all vertices of the undirected edges to their `k` nearest
/// neighbours. Distance ties go to the lower region index.
pub fn structural_edges(atlas: &RegionAtlas, k: usize) -> Result<BTreeSet<(usize, usize)>> {
    let n = atlas.len();
    if k == 0 || k >= n {
        return Err(GraphError::InvalidK { k, vertices: n });
    }
    for i in 0..n {
        for j in i + 1..n {
            if atlas.regions[i].position == atlas.regions[j].position {
                return Err(GraphError::Atlas(format!(
                    "regions `{}` and `{}` share coordinates",
                    atlas.regions[i].id, atlas.regions[j].id
                )));
            }
        }
    }
    let mut edges = BTreeSet::new();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for v in 0..n {
        order.clear();
        order.extend((0..n).filter(|&u| u != v).map(|u| (atlas.distance(v, u), u)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, u) in order.iter().take(k) {
            edges.insert((v.min(u), v.max(u)));
        }
    }
    Ok(edges)
}

/// Percentile with linear interpolation between order statistics
/// (the inclusive definition: rank `p/100 · (n − 1)`).
pub fn percentile_linear(values: &[f64], percentile: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Off-diagonal edges whose value is strictly above the given percentile of
/// all upper-triangle values.
pub fn functional_edges(conn: &ConnectivityMatrix, percentile: f64) -> Result<BTreeSet<(usize, usize)>> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(GraphError::InvalidPercentile(percentile));
    }
    let n = conn.size();
    if n < 2 {
        return Ok(BTreeSet::new());
    }
    let threshold = percentile_linear(&conn.upper_triangle(), percentile);
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if conn.get(i, j) > threshold {
                edges.insert((i, j));
            }
        }
    }
    Ok(edges)
}

/// Sparsify one band: structural ∪ functional ∪ self-loops.
pub fn rewire_layer(conn: &ConnectivityMatrix, atlas: &RegionAtlas, k: usize, percentile: f64) -> Result<LayerGraph> {
    let n = atlas.len();
    if conn.size() != n {
        return Err(GraphError::Dimension(format!(
            "{} matrix is {}x{} but the atlas has {n} regions",
            conn.band(),
            conn.size(),
            conn.size()
        )));
    }
    let structural = structural_edges(atlas, k)?;
    let functional = functional_edges(conn, percentile)?;
    let mut tagged: BTreeMap<(usize, usize), Provenance> = BTreeMap::new();
    for &e in &structural {
        tagged.insert(e, Provenance::Structural);
    }
    for &e in &functional {
        tagged
            .entry(e)
            .and_modify(|p| *p = Provenance::Both)
            .or_insert(Provenance::Functional);
    }
    let kept = tagged.len();
    for v in 0..n {
        tagged.insert((v, v), Provenance::SelfLoop);
    }
    let edges = tagged
        .into_iter()
        .map(|((u, v), provenance)| LayerEdge {
            u,
            v,
            weight: if u == v { 1.0 } else { conn.get(u, v) },
            provenance,
        })
        .collect();
    let candidates = n * (n - 1) / 2;
    Ok(LayerGraph {
        band: conn.band(),
        num_vertices: n,
        edges,
        retention_ratio: if candidates == 0 { 0.0 } else { kept as f64 / candidates as f64 },
    })
}

/// Stack layers over a shared vertex set and add replica edges (weight 1).
pub fn assemble_multilayer(layers: Vec<LayerGraph>, coupling: Coupling) -> Result<MultilayerGraph> {
    let first = layers
        .first()
        .ok_or_else(|| GraphError::Dimension("a multilayer graph needs at least one layer".into()))?;
    let n = first.num_vertices;
    if let Some(bad) = layers.iter().find(|l| l.num_vertices != n) {
        return Err(GraphError::Dimension(format!(
            "layer {} has {} vertices, expected {n}",
            bad.band, bad.num_vertices
        )));
    }
    let pairs: Vec<(usize, usize)> = match coupling {
        Coupling::AdjacentReplica => (1..layers.len()).map(|i| (i - 1, i)).collect(),
        Coupling::AllPairsReplica => (0..layers.len())
            .flat_map(|a| (a + 1..layers.len()).map(move |b| (a, b)))
            .collect(),
    };
    let inter = pairs
        .into_iter()
        .flat_map(|(a, b)| {
            (0..n).map(move |vertex| InterLayerEdge {
                vertex,
                layer_a: a,
                layer_b: b,
                weight: 1.0,
            })
        })
        .collect();
    Ok(MultilayerGraph { layers, inter })
}

/// Rewiring parameters shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewireConfig {
    pub k: usize,
    pub percentile: f64,
    pub bands: Vec<Band>,
    pub coupling: Coupling,
}

impl Default for RewireConfig {
    fn default() -> Self {
        Self {
            k: 3,
            percentile: 99.0,
            bands: Band::DEFAULT_LAYERS.to_vec(),
            coupling: Coupling::AdjacentReplica,
        }
    }
}

/// Rewire each configured band and assemble the multilayer graph.
pub fn build_multilayer(
    matrices: &BTreeMap<Band, ConnectivityMatrix>,
    atlas: &RegionAtlas,
    config: &RewireConfig,
) -> Result<MultilayerGraph> {
    let layers = config
        .bands
        .iter()
        .map(|band| {
            let conn = matrices
                .get(band)
                .ok_or_else(|| GraphError::Dimension(format!("no {band} matrix available")))?;
            rewire_layer(conn, atlas, config.k, config.percentile)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_multilayer(layers, config.coupling)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_atlas(n: usize) -> RegionAtlas {
        RegionAtlas::new(
            (0..n)
                .map(|i| Region {
                    id: format!("r{i}"),
                    position: [i as f64, 0.0, 0.0],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn collinear_nearest_neighbours() {
        let edges = structural_edges(&line_atlas(4), 1).unwrap();
        assert_eq!(edges, BTreeSet::from([(0, 1), (1, 2), (2, 3)]));
    }

    #[test]
    fn k_of_v_minus_one_is_complete() {
        let edges = structural_edges(&line_atlas(6), 5).unwrap();
        assert_eq!(edges.len(), 15);
    }

    #[test]
    fn invalid_k_and_duplicates() {
        assert!(matches!(structural_edges(&line_atlas(4), 4), Err(GraphError::InvalidK { .. })));
        assert!(matches!(structural_edges(&line_atlas(4), 0), Err(GraphError::InvalidK { .. })));
        let dup = RegionAtlas::new(vec![
            Region { id: "a".into(), position: [0.0; 3] },
            Region { id: "b".into(), position: [0.0; 3] },
            Region { id: "c".into(), position: [1.0, 0.0, 0.0] },
        ])
        .unwrap();
        assert!(matches!(structural_edges(&dup, 1), Err(GraphError::Atlas(_))));
    }

    #[test]
    fn default_atlas_has_31_distinct_regions() {
        let atlas = RegionAtlas::default_31();
        assert_eq!(atlas.len(), 31);
        assert!(structural_edges(&atlas, 3).is_ok());
    }

    #[test]
    fn equal_entries_yield_no_functional_edges() {
        let n = 5;
        let mut v = vec![0.4; n * n];
        for i in 0..n {
            v[i * n + i] = 0.0;
        }
        let m = ConnectivityMatrix::new(Band::Alpha1, n, v).unwrap();
        assert!(functional_edges(&m, 99.0).unwrap().is_empty());
        let zero = ConnectivityMatrix::zeros(Band::Alpha1, n);
        assert!(functional_edges(&zero, 99.0).unwrap().is_empty());
    }

    #[test]
    fn single_strong_entry_is_kept() {
        let n = 6;
        let mut v = vec![0.1; n * n];
        for i in 0..n {
            v[i * n + i] = 0.0;
        }
        v[1 * n + 4] = 0.9;
        v[4 * n + 1] = 0.9;
        let m = ConnectivityMatrix::new(Band::Beta1, n, v).unwrap();
        assert_eq!(functional_edges(&m, 99.0).unwrap(), BTreeSet::from([(1, 4)]));
    }

    #[test]
    fn percentile_bounds() {
        let m = ConnectivityMatrix::zeros(Band::Delta, 3);
        assert!(functional_edges(&m, 0.0).is_err());
        assert!(functional_edges(&m, 100.0).is_err());
        assert_eq!(percentile_linear(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
    }

    #[test]
    fn matrix_validation() {
        assert!(ConnectivityMatrix::new(Band::Theta, 2, vec![0.0, 0.5, 0.4, 0.0]).is_err());
        assert!(ConnectivityMatrix::new(Band::Theta, 2, vec![0.1, 0.5, 0.5, 0.0]).is_err());
        assert!(ConnectivityMatrix::new(Band::Theta, 2, vec![0.0, 1.5, 1.5, 0.0]).is_err());
        assert!(ConnectivityMatrix::new(Band::Theta, 2, vec![0.0, 0.5, 0.5, 0.0]).is_ok());
    }

    #[test]
    fn zero_connectivity_rewires_to_structure_plus_loops() {
        let atlas = RegionAtlas::default_31();
        let layer = rewire_layer(&ConnectivityMatrix::zeros(Band::Alpha2, 31), &atlas, 3, 99.0).unwrap();
        let structural = structural_edges(&atlas, 3).unwrap();
        let mut expected = structural.clone();
        expected.extend((0..31).map(|v| (v, v)));
        assert_eq!(layer.edge_set(), expected);
        assert!(layer
            .edges
            .iter()
            .all(|e| (e.u == e.v) == (e.provenance == Provenance::SelfLoop)));
    }

    #[test]
    fn rewire_rejects_dimension_mismatch() {
        let atlas = RegionAtlas::default_31();
        let err = rewire_layer(&ConnectivityMatrix::zeros(Band::Alpha2, 30), &atlas, 3, 99.0).unwrap_err();
        assert!(matches!(err, GraphError::Dimension(_)));
    }

    #[test]
    fn inter_layer_counts() {
        let atlas = RegionAtlas::default_31();
        let layer = |b| rewire_layer(&ConnectivityMatrix::zeros(b, 31), &atlas, 3, 99.0).unwrap();
        let layers = vec![layer(Band::Alpha1), layer(Band::Alpha2), layer(Band::Beta1)];
        let adj = assemble_multilayer(layers.clone(), Coupling::AdjacentReplica).unwrap();
        assert_eq!(adj.inter.len(), 62);
        let all = assemble_multilayer(layers.clone(), Coupling::AllPairsReplica).unwrap();
        assert_eq!(all.inter.len(), 93);
        let one = assemble_multilayer(vec![layers[0].clone()], Coupling::AdjacentReplica).unwrap();
        assert!(one.inter.is_empty());
        assert!(assemble_multilayer(vec![], Coupling::AdjacentReplica).is_err());
        assert!(adj
            .inter
            .iter()
            .all(|e| e.layer_a != e.layer_b && e.vertex < 31));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let a = rewire_layer(&ConnectivityMatrix::zeros(Band::Alpha1, 4), &line_atlas(4), 1, 99.0).unwrap();
        let b = rewire_layer(&ConnectivityMatrix::zeros(Band::Alpha2, 5), &line_atlas(5), 1, 99.0).unwrap();
        assert!(assemble_multilayer(vec![a, b], Coupling::AdjacentReplica).is_err());
    }

    #[test]
    fn label_range() {
        let g = assemble_multilayer(
            vec![rewire_layer(&ConnectivityMatrix::zeros(Band::Alpha1, 3), &line_atlas(3), 1, 99.0).unwrap()],
            Coupling::AdjacentReplica,
        )
        .unwrap();
        assert!(PatientSample::new("p", "h", 0, g.clone()).is_err());
        assert!(PatientSample::new("p", "h", 43, g.clone()).is_err());
        assert!(PatientSample::new("p", "h", 42, g).is_ok());
    }
}
