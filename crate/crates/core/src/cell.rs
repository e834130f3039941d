//! Cell DAG structure, architecture parameters, and the discrete genotype.

use serde::{Deserialize, Serialize};

use crate::candidates::{OpKind, NUM_OPS};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, ChaCha8Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normal cells preserve resolution; reduction cells halve it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub const BOTH: [CellType; 2] = [CellType::Normal, CellType::Reduce];

    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

impl std::fmt::Display for CellType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The cell DAG: nodes 0,1 are inputs, nodes 2..2+steps are intermediate,
/// plus one implicit output node that concatenates all intermediates.
/// Edges (i,j) with i < j are stored in lexicographic order; that order is
/// the edge index used by the alpha table and by log edge ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTopology {
    steps: usize,
    edges: Vec<(usize, usize)>,
}

impl Default for CellTopology {
    fn default() -> Self {
        Self::new(4)
    }
}

impl CellTopology {
    pub fn new(steps: usize) -> Self {
        let mut edges = Vec::new();
        for i in 0..2 + steps {
            for j in (i + 1).max(2)..2 + steps {
                edges.push((i, j));
            }
        }
        edges.sort_unstable();
        CellTopology { steps, edges }
    }

    /// Number of intermediate nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Total node count including the output node.
    pub fn n_nodes(&self) -> usize {
        self.steps + 3
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.iter().position(|&e| e == (i, j))
    }

    /// Indices of edges feeding intermediate node `j`.
    pub fn incoming(&self, j: usize) -> Vec<usize> {
        (0..self.edges.len()).filter(|&e| self.edges[e].1 == j).collect()
    }

    /// Intermediate node ids, in order.
    pub fn intermediates(&self) -> impl Iterator<Item = usize> {
        2..2 + self.steps
    }
}

/// Architecture parameters: one (edges x ops) matrix per cell type, shared
/// across every cell instance of that type.
pub struct AlphaTable<T> {
    pub normal: Tensor<T>,
    pub reduce: Tensor<T>,
    num_edges: usize,
}

impl<T: Scalar> AlphaTable<T> {
    /// Near-zero Gaussian init: a symmetric, near-uniform mixing start.
    pub fn new(topology: &CellTopology, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let e = topology.num_edges();
        let normal = Tensor::param(vec![e, NUM_OPS], normal_vec(rng, e * NUM_OPS, std)).unwrap();
        let reduce = Tensor::param(vec![e, NUM_OPS], normal_vec(rng, e * NUM_OPS, std)).unwrap();
        AlphaTable { normal, reduce, num_edges: e }
    }

    pub fn table(&self, cell_type: CellType) -> &Tensor<T> {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Copies one edge's op scores out of the table.
    pub fn row_values(&self, cell_type: CellType, edge: usize) -> Vec<T> {
        let t = self.table(cell_type);
        t.values()[edge * NUM_OPS..(edge + 1) * NUM_OPS].to_vec()
    }

    /// Full-precision snapshot (normal rows then reduce rows).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        let mut rows = Vec::with_capacity(2 * self.num_edges);
        for t in [&self.normal, &self.reduce] {
            let v = t.values();
            for e in 0..self.num_edges {
                rows.push(v[e * NUM_OPS..(e + 1) * NUM_OPS].iter().map(|x| x.to_f64_lossy()).collect());
            }
        }
        rows
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_tie_low<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(OpKind, usize, usize)", into = "(OpKind, usize, usize)")]
pub struct GenotypeEdge {
    pub op: OpKind,
    pub from: usize,
    pub to: usize,
}

impl From<(OpKind, usize, usize)> for GenotypeEdge {
    fn from((op, from, to): (OpKind, usize, usize)) -> Self {
        GenotypeEdge { op, from, to }
    }
}

impl From<GenotypeEdge> for (OpKind, usize, usize) {
    fn from(e: GenotypeEdge) -> Self {
        (e.op, e.from, e.to)
    }
}

/// The pruned discrete architecture: per cell type, one op per retained edge
/// with exactly two retained edges per intermediate node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<GenotypeEdge>,
    pub reduce: Vec<GenotypeEdge>,
    pub concat: Vec<usize>,
}

impl Genotype {
    pub fn edges(&self, cell_type: CellType) -> &[GenotypeEdge] {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    /// Structural validation against a topology.
    pub fn validate(&self, topology: &CellTopology) -> Result<()> {
        let expect_concat: Vec<usize> = topology.intermediates().collect();
        if self.concat != expect_concat {
            return Err(Error::arg(format!(
                "genotype concat {:?} does not match intermediate nodes {:?}",
                self.concat, expect_concat
            )));
        }
        for (cell_type, edges) in [(CellType::Normal, &self.normal), (CellType::Reduce, &self.reduce)] {
            for e in edges {
                if e.op == OpKind::Zero {
                    return Err(Error::arg(format!("{cell_type} cell retains a zero op")));
                }
                if topology.edge_index(e.from, e.to).is_none() {
                    return Err(Error::arg(format!(
                        "{cell_type} cell names edge ({},{}) not in the topology",
                        e.from, e.to
                    )));
                }
            }
            for j in topology.intermediates() {
                let k = edges.iter().filter(|e| e.to == j).count();
                if k != 2 {
                    return Err(Error::arg(format!(
                        "{cell_type} cell retains {k} edges into node {j}, expected 2"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical single-line JSON; field order is fixed by the struct.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// DOT rendering of both cells: inputs c_{k-2}/c_{k-1}, intermediate
    /// nodes 0..steps-1, output c_k.
    pub fn to_dot(&self) -> String {
        fn node_name(prefix: &str, idx: usize) -> String {
            match idx {
                0 => format!("{prefix}_ckm2"),
                1 => format!("{prefix}_ckm1"),
                j => format!("{prefix}_{}", j - 2),
            }
        }
        let mut out = String::from("digraph genotype {\n  rankdir=LR;\n");
        for (cell_type, edges) in [(CellType::Normal, &self.normal), (CellType::Reduce, &self.reduce)] {
            let p = match cell_type {
                CellType::Normal => "n",
                CellType::Reduce => "r",
            };
            out.push_str(&format!("  subgraph cluster_{cell_type} {{\n    label=\"{cell_type} cell\";\n"));
            out.push_str(&format!("    {}_ckm2 [label=\"c_{{k-2}}\" shape=box];\n", p));
            out.push_str(&format!("    {}_ckm1 [label=\"c_{{k-1}}\" shape=box];\n", p));
            let steps = self.concat.len();
            for j in 0..steps {
                out.push_str(&format!("    {p}_{j} [label=\"{j}\"];\n"));
            }
            out.push_str(&format!("    {p}_ck [label=\"c_{{k}}\" shape=box];\n"));
            for e in edges.iter() {
                out.push_str(&format!(
                    "    {} -> {} [label=\"{}\"];\n",
                    node_name(p, e.from),
                    node_name(p, e.to),
                    e.op
                ));
            }
            for &j in &self.concat {
                out.push_str(&format!("    {}_{} -> {p}_ck;\n", p, j - 2));
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn default_topology_has_14_edges() {
        let topo = CellTopology::default();
        assert_eq!(topo.num_edges(), 14);
        assert_eq!(topo.n_nodes(), 7);
        // Lexicographic ordering of (i,j) pairs.
        assert_eq!(topo.edges()[0], (0, 2));
        assert_eq!(topo.edges()[1], (0, 3));
        assert_eq!(topo.edges()[13], (4, 5));
        // Acyclic by construction.
        assert!(topo.edges().iter().all(|&(i, j)| i < j));
        // 2+3+4+5 incoming edges.
        assert_eq!(topo.incoming(2).len(), 2);
        assert_eq!(topo.incoming(5).len(), 5);
    }

    #[test]
    fn alpha_table_dims() {
        let topo = CellTopology::default();
        let alphas = AlphaTable::<f64>::new(&topo, 1e-3, &mut rng_from(0));
        assert_eq!(alphas.normal.shape(), &[14, 8]);
        assert_eq!(alphas.reduce.shape(), &[14, 8]);
        assert_eq!(alphas.snapshot().len(), 28);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_tie_low(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(argmax_tie_low(&[0.0, 2.0, 2.0]), 1);
        assert_eq!(argmax_tie_low(&[0.0, -1.0, 3.0]), 2);
    }

    fn all_skip_genotype() -> Genotype {
        let mk = |_: CellType| {
            (2..6)
                .flat_map(|j| {
                    [(0, j), (1, j)]
                        .into_iter()
                        .map(move |(i, j)| GenotypeEdge { op: OpKind::SkipConnect, from: i, to: j })
                })
                .collect()
        };
        Genotype { normal: mk(CellType::Normal), reduce: mk(CellType::Reduce), concat: vec![2, 3, 4, 5] }
    }

    #[test]
    fn genotype_json_round_trip() {
        let g = all_skip_genotype();
        let json = g.to_canonical_json();
        assert!(json.starts_with("{\"normal\":[[\"skip_connect\",0,2],"));
        assert!(json.contains("\"concat\":[2,3,4,5]"));
        let back = Genotype::from_json(&json).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_canonical_json(), json);
    }

    #[test]
    fn genotype_validation_catches_defects() {
        let topo = CellTopology::default();
        let good = all_skip_genotype();
        good.validate(&topo).unwrap();

        let mut zero = good.clone();
        zero.normal[0].op = OpKind::Zero;
        assert!(zero.validate(&topo).is_err());

        let mut missing = good.clone();
        missing.reduce.pop();
        assert!(missing.validate(&topo).is_err());

        let mut bad_edge = good.clone();
        bad_edge.normal[0].from = 3;
        bad_edge.normal[0].to = 2;
        assert!(bad_edge.validate(&topo).is_err());
    }

    #[test]
    fn dot_export_mentions_all_edges() {
        let g = all_skip_genotype();
        let dot = g.to_dot();
        assert_eq!(dot.matches("skip_connect").count(), 16);
        assert!(dot.contains("c_{k-2}"));
        assert!(dot.contains("subgraph cluster_normal"));
        assert!(dot.contains("subgraph cluster_reduce"));
    }
}
