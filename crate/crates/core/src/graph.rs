//! Symmetric normalized bipartite adjacency and the `(Ãⁿ − I)` propagation
//! operator over stacked user/item embeddings.
//!
//! Node layout: users occupy rows `[0, U)`, items `[U, U + I)`.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};

/// Ã = D^{-1/2} A D^{-1/2} over the train edges, in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    node_count: usize,
    num_users: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Builds the adjacency from the train split only.
    pub fn from_dataset(dataset: &InteractionDataset) -> Result<Self> {
        Self::from_edges(dataset.num_users(), dataset.num_items(), dataset.train())
    }

    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Config("train split is empty".into()));
        }
        let n = num_users + num_items;
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, i) in edges {
            let (u, i) = (u as usize, i as usize);
            if u >= num_users || i >= num_items {
                return Err(Error::IndexOutOfRange(format!("edge ({u}, {i})")));
            }
            neighbours[u].push(num_users + i);
            neighbours[num_users + i].push(u);
        }
        for list in &mut neighbours {
            list.sort_unstable();
            list.dedup();
        }
        let degree: Vec<f64> = neighbours.iter().map(|l| l.len() as f64).collect();

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (a, list) in neighbours.iter().enumerate() {
            for &b in list {
                col_idx.push(b);
                values.push(1.0 / (degree[a] * degree[b]).sqrt());
            }
            row_ptr.push(col_idx.len());
        }
        Ok(NormalizedAdjacency {
            node_count: n,
            num_users,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of one row, in ascending column order.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Dense copy, for small-instance checks.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.node_count, self.node_count));
        for r in 0..self.node_count {
            for (c, v) in self.row(r) {
                out[[r, c]] = v;
            }
        }
        out
    }

    /// `out = Ã · x`. Each output row sums its neighbours in ascending column
    /// order, so the result does not depend on the thread count.
    pub fn multiply_into(&self, x: ArrayView2<'_, f64>, out: &mut Array2<f64>) {
        Zip::indexed(out.axis_iter_mut(Axis(0))).par_for_each(|r, mut row| {
            row.fill(0.0);
            for (c, v) in self.row(r) {
                row.scaled_add(v, &x.row(c));
            }
        });
    }

    pub fn multiply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        self.multiply_into(x, &mut out);
        out
    }
}

/// Applies `Ãⁿ·X − X` without forming `Ãⁿ`.
#[derive(Debug, Clone)]
pub struct PropagationOperator {
    adjacency: NormalizedAdjacency,
    order: usize,
}

impl PropagationOperator {
    pub fn new(adjacency: NormalizedAdjacency, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("propagation order must be at least 1".into()));
        }
        Ok(PropagationOperator { adjacency, order })
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adjacency
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.node_count
    }

    /// The operator is symmetric, so this is also its own transpose-apply.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.adjacency.node_count {
            return Err(Error::Dimension(format!(
                "state has {} rows, graph has {} nodes",
                x.nrows(),
                self.adjacency.node_count
            )));
        }
        let mut cur = self.adjacency.multiply(x);
        let mut next = Array2::zeros(x.raw_dim());
        for _ in 1..self.order {
            self.adjacency.multiply_into(cur.view(), &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur -= &x;
        Ok(cur)
    }
}
