//! Directed graphs over agents. Used for the observability graph, where an
//! edge `(i, j)` means agent `i` sees agent `j`'s realized actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct DirectedGraph {
    out_edges: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_vertices: usize,
    pub edges: Vec<[usize; 2]>,
}

impl DirectedGraph {
    pub fn new(num_vertices: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_vertices == 0 {
            return Err(Error::input("graph needs at least one vertex"));
        }
        let mut out_edges = vec![Vec::new(); num_vertices];
        for (i, j) in edges {
            if i >= num_vertices || j >= num_vertices {
                return Err(Error::input(format!(
                    "edge ({i},{j}) out of range for {num_vertices} vertices"
                )));
            }
            if i == j {
                return Err(Error::input(format!("self-loop on vertex {i}")));
            }
            out_edges[i].push(j);
        }
        for list in &mut out_edges {
            list.sort_unstable();
            list.dedup();
        }
        Ok(DirectedGraph { out_edges })
    }

    pub fn empty(num_vertices: usize) -> Self {
        assert!(num_vertices > 0);
        DirectedGraph {
            out_edges: vec![Vec::new(); num_vertices],
        }
    }

    pub fn complete(num_vertices: usize) -> Self {
        assert!(num_vertices > 0);
        DirectedGraph {
            out_edges: (0..num_vertices)
                .map(|i| (0..num_vertices).filter(|&j| j != i).collect())
                .collect(),
        }
    }

    /// Each ordered pair `(i, j)`, `i != j`, is included independently with
    /// probability `p`. Pairs are visited row-major, one uniform draw each.
    pub fn erdos_renyi<R: Rng + ?Sized>(num_vertices: usize, p: f64, rng: &mut R) -> Result<Self> {
        check_probability(p)?;
        if num_vertices == 0 {
            return Err(Error::input("graph needs at least one vertex"));
        }
        let mut out_edges = vec![Vec::new(); num_vertices];
        for (i, list) in out_edges.iter_mut().enumerate() {
            for j in 0..num_vertices {
                if j != i && rng.random::<f64>() < p {
                    list.push(j);
                }
            }
        }
        Ok(DirectedGraph { out_edges })
    }

    /// Like [`Self::erdos_renyi`] but with one draw per unordered pair, so
    /// `(i, j)` is present exactly when `(j, i)` is.
    pub fn erdos_renyi_symmetric<R: Rng + ?Sized>(
        num_vertices: usize,
        p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_probability(p)?;
        let mut edges = Vec::new();
        for i in 0..num_vertices {
            for j in i + 1..num_vertices {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                    edges.push((j, i));
                }
            }
        }
        DirectedGraph::new(num_vertices, edges)
    }

    pub fn num_vertices(&self) -> usize {
        self.out_edges.len()
    }

    pub fn num_edges(&self) -> usize {
        self.out_edges.iter().map(Vec::len).sum()
    }

    pub fn observes(&self, i: usize, j: usize) -> Result<bool> {
        self.check_vertex(i)?;
        self.check_vertex(j)?;
        if i == j {
            return Err(Error::input(format!("observes({i},{i}) is undefined")));
        }
        Ok(self.out_edges[i].binary_search(&j).is_ok())
    }

    pub fn out_neighbors(&self, i: usize) -> Result<&[usize]> {
        self.check_vertex(i)?;
        Ok(&self.out_edges[i])
    }

    pub(crate) fn neighbors(&self, i: usize) -> &[usize] {
        &self.out_edges[i]
    }

    pub(crate) fn contains(&self, i: usize, j: usize) -> bool {
        self.out_edges[i].binary_search(&j).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out_edges
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
    }

    fn check_vertex(&self, v: usize) -> Result<()> {
        if v >= self.num_vertices() {
            return Err(Error::input(format!(
                "vertex {v} out of range for {} vertices",
                self.num_vertices()
            )));
        }
        Ok(())
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::input(format!("edge probability {p} outside [0, 1]")));
    }
    Ok(())
}

impl TryFrom<GraphFile> for DirectedGraph {
    type Error = Error;

    fn try_from(file: GraphFile) -> Result<Self> {
        let before = file.edges.len();
        let g = DirectedGraph::new(file.num_vertices, file.edges.into_iter().map(|[i, j]| (i, j)))?;
        if g.num_edges() != before {
            return Err(Error::input("duplicate edges in graph file"));
        }
        Ok(g)
    }
}

impl From<DirectedGraph> for GraphFile {
    fn from(g: DirectedGraph) -> Self {
        GraphFile {
            num_vertices: g.num_vertices(),
            edges: g.edges().map(|(i, j)| [i, j]).collect(),
        }
    }
}
