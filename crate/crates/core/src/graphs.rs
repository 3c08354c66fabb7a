//! Collaborative and semantic views.
//!
//! The collaborative view is the normalized user–item bipartite graph with
//! LightGCN layer averaging. Each modality contributes a kNN item–item graph
//! over cosine similarity, propagated one layer and pooled to users through
//! their training items.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;

use crate::data::{InteractionMatrix, Modality};
use crate::error::{Error, Result};
use crate::substrate::{Csr, DegreeMode, Dense, Scalar, Tape, Var};

/// Normalized bipartite adjacency over `|U| + |I|` nodes, users first.
#[derive(Clone, Debug)]
pub struct CollabGraph<T: Scalar = f32> {
    pub adjacency: Arc<Csr<T>>,
    /// User block of the adjacency: `1/√(|N_u|·|N_i|)` per training pair.
    pub user_items: Arc<Csr<T>>,
    pub layers: usize,
    pub n_users: usize,
    pub n_items: usize,
}

impl<T: Scalar> CollabGraph<T> {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn cast<U: Scalar>(&self) -> CollabGraph<U> {
        CollabGraph {
            adjacency: Arc::new(self.adjacency.cast()),
            user_items: Arc::new(self.user_items.cast()),
            layers: self.layers,
            n_users: self.n_users,
            n_items: self.n_items,
        }
    }
}

pub fn build_collab_graph(o: &InteractionMatrix, layers: usize) -> Result<CollabGraph> {
    let (nu, ni) = (o.n_users(), o.n_items());
    let mut trip = Vec::with_capacity(2 * o.matrix.nnz());
    for u in 0..nu {
        for &i in o.matrix.row(u).0 {
            trip.push((u, nu + i, 1.0f32));
            trip.push((nu + i, u, 1.0f32));
        }
    }
    let adjacency = Csr::from_triplets(nu + ni, nu + ni, trip)?.sym_normalize(DegreeMode::Count)?;
    Ok(CollabGraph {
        adjacency: Arc::new(adjacency),
        user_items: Arc::new(user_item_norm(o)?),
        layers,
        n_users: nu,
        n_items: ni,
    })
}

/// `|U|×|I|` matrix with `1/√(|N_u|·|N_i|)` at every training pair.
pub fn user_item_norm(o: &InteractionMatrix) -> Result<Csr<f32>> {
    let mut trip = Vec::with_capacity(o.matrix.nnz());
    for u in 0..o.n_users() {
        for &i in o.matrix.row(u).0 {
            let d = (o.user_degree[u] * o.item_degree[i]) as f64;
            trip.push((u, i, (1.0 / d.sqrt()) as f32));
        }
    }
    Csr::from_triplets(o.n_users(), o.n_items(), trip)
}

fn check_rows(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dim(op, format!("expected {expected} rows, got {actual}")));
    }
    Ok(())
}

/// `(1/(L+1))·Σ_{l=0..L} Â^l E0`.
pub fn propagate_collab<T: Scalar>(tape: &mut Tape<T>, graph: &CollabGraph<T>, e0: Var) -> Result<Var> {
    check_rows("propagate_collab", graph.n_nodes(), tape.value(e0).rows())?;
    let mut layer = e0;
    let mut acc = e0;
    for _ in 0..graph.layers {
        layer = tape.spmm(graph.adjacency.clone(), layer)?;
        acc = tape.add(acc, layer)?;
    }
    Ok(tape.scale(acc, T::of(1.0 / (graph.layers + 1) as f64)))
}

/// Item–item kNN graph of one modality.
#[derive(Clone, Debug)]
pub struct SemanticGraph<T: Scalar = f32> {
    pub modality: Modality,
    pub k: usize,
    /// Kept cosine weights per row, before symmetrization.
    pub knn: Csr<T>,
    /// Symmetrized, degree-normalized adjacency used for propagation.
    pub adjacency: Arc<Csr<T>>,
}

impl<T: Scalar> SemanticGraph<T> {
    pub fn cast<U: Scalar>(&self) -> SemanticGraph<U> {
        SemanticGraph {
            modality: self.modality,
            k: self.k,
            knn: self.knn.cast(),
            adjacency: Arc::new(self.adjacency.cast()),
        }
    }

    pub fn n_items(&self) -> usize {
        self.knn.rows()
    }
}

/// Rows of the cosine-similarity matrix computed per block.
const COSINE_BLOCK: usize = 512;

/// Ranking used for neighbor selection: larger similarity first, then smaller index.
pub fn neighbor_order(a: (usize, f32), b: (usize, f32)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Top-`k` neighbors (by cosine) of every row. Zero rows neither have nor
/// serve as neighbors.
pub fn knn_cosine(features: &Dense<f32>, k: usize) -> Result<Vec<Vec<(usize, f32)>>> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::Config("kNN size K must be at least 1".into()));
    }
    let k = if n > 0 && k >= n {
        warn!("K = {k} is not below the item count {n}; clamped to {}", n - 1);
        n - 1
    } else {
        k
    };
    let norms = features.row_norms();
    let live: Vec<bool> = norms.iter().map(|&v| v > 0.0).collect();
    let unit = Dense::from_fn(n, features.cols(), |r, c| {
        if live[r] {
            features.get(r, c) / norms[r]
        } else {
            0.0
        }
    });
    let starts: Vec<usize> = (0..n).step_by(COSINE_BLOCK).collect();
    let blocks = starts
        .par_iter()
        .map(|&s| {
            let e = (s + COSINE_BLOCK).min(n);
            let sims = unit.slice_rows(s, e).matmul_t(&unit)?;
            let mut out = Vec::with_capacity(e - s);
            for a in s..e {
                if !live[a] || k == 0 {
                    out.push(Vec::new());
                    continue;
                }
                let mut cand: Vec<(usize, f32)> = sims
                    .row(a - s)
                    .iter()
                    .enumerate()
                    .filter(|&(b, _)| b != a && live[b])
                    .map(|(b, &v)| (b, v.clamp(-1.0, 1.0)))
                    .collect();
                let kk = k.min(cand.len());
                if kk > 0 && kk < cand.len() {
                    cand.select_nth_unstable_by(kk - 1, |x, y| neighbor_order(*x, *y));
                }
                cand.truncate(kk);
                cand.sort_by(|x, y| neighbor_order(*x, *y));
                out.push(cand);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

fn knn_matrix(n: usize, lists: &[Vec<(usize, f32)>]) -> Result<Csr<f32>> {
    let trip = lists
        .iter()
        .enumerate()
        .flat_map(|(a, l)| l.iter().map(move |&(b, w)| (a, b, w)))
        .collect();
    Csr::from_triplets(n, n, trip)
}

/// Union of both edge directions; each undirected edge carries its cosine once.
fn symmetrize(knn: &Csr<f32>) -> Result<Csr<f32>> {
    let mut trip = Vec::with_capacity(2 * knn.nnz());
    for a in 0..knn.rows() {
        let (idx, val) = knn.row(a);
        for (&b, &w) in idx.iter().zip(val) {
            trip.push((a, b, w));
            if knn.row(b).0.binary_search(&a).is_err() {
                trip.push((b, a, w));
            }
        }
    }
    Csr::from_triplets(knn.rows(), knn.cols(), trip)
}

fn from_knn(modality: Modality, k: usize, knn: Csr<f32>) -> Result<SemanticGraph> {
    let adjacency = symmetrize(&knn)?.sym_normalize(DegreeMode::AbsValueSum)?;
    Ok(SemanticGraph {
        modality,
        k,
        knn,
        adjacency: Arc::new(adjacency),
    })
}

pub fn build_semantic_graph(
    modality: Modality,
    features: &Dense<f32>,
    k: usize,
) -> Result<SemanticGraph> {
    let lists = knn_cosine(features, k)?;
    let k_used = k.min(features.rows().saturating_sub(1));
    let knn = knn_matrix(features.rows(), &lists)?;
    from_knn(modality, k_used, knn)
}

/// One layer of semantic propagation.
pub fn propagate_semantic<T: Scalar>(tape: &mut Tape<T>, graph: &SemanticGraph<T>, x: Var) -> Result<Var> {
    check_rows("propagate_semantic", graph.n_items(), tape.value(x).rows())?;
    tape.spmm(graph.adjacency.clone(), x)
}

/// Pool item rows to users with `1/√(|N_u|·|N_i|)` weights.
pub fn aggregate_user_modal<T: Scalar>(
    tape: &mut Tape<T>,
    user_items: &Arc<Csr<T>>,
    items: Var,
) -> Result<Var> {
    check_rows("aggregate_user_modal", user_items.cols(), tape.value(items).rows())?;
    tape.spmm(user_items.clone(), items)
}

/// Writes the kept neighbor lists as `a<TAB>b<TAB>weight` lines.
pub fn write_semantic_graph(path: &Path, graph: &SemanticGraph) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# modality={} k={} items={}", graph.modality, graph.k, graph.n_items());
    for a in 0..graph.knn.rows() {
        let (idx, val) = graph.knn.row(a);
        for (&b, &w) in idx.iter().zip(val) {
            let _ = writeln!(s, "{a}\t{b}\t{w}");
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_semantic_graph(path: &Path, modality: Modality, n_items: usize, k: usize) -> Result<SemanticGraph> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trip = Vec::new();
    let mut per_row = vec![0usize; n_items];
    for (n, line) in body.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected `a<TAB>b<TAB>weight`".into()));
        }
        let a: usize = f[0].parse().map_err(|_| bad("bad source index".into()))?;
        let b: usize = f[1].parse().map_err(|_| bad("bad target index".into()))?;
        let w: f32 = f[2].parse().map_err(|_| bad("bad weight".into()))?;
        if a >= n_items || b >= n_items {
            return Err(bad(format!("index outside {n_items} items")));
        }
        if a == b {
            return Err(bad("self loop".into()));
        }
        if !(-1.0..=1.0).contains(&w) {
            return Err(bad(format!("weight {w} outside [-1, 1]")));
        }
        per_row[a] += 1;
        if per_row[a] > k {
            return Err(bad(format!("row {a} has more than K = {k} neighbors")));
        }
        trip.push((a, b, w));
    }
    from_knn(modality, k, Csr::from_triplets(n_items, n_items, trip)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_interaction_matrix;

    fn close(a: &Dense<f64>, b: &Dense<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn single_edge_graph() {
        let o = build_interaction_matrix(&[(0, 0)], 1, 1).unwrap();
        let g = build_collab_graph(&o, 2).unwrap();
        assert_eq!(g.adjacency.to_dense().as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        let empty = build_interaction_matrix(&[], 2, 3).unwrap();
        assert_eq!(build_collab_graph(&empty, 2).unwrap().adjacency.nnz(), 0);
    }

    #[test]
    fn toy_normalization_by_hand() {
        // users 0,1,2; items 0,1; degrees u=(2,1,1), i=(2,2)
        let o = build_interaction_matrix(&[(0, 0), (0, 1), (1, 0), (2, 1)], 3, 2).unwrap();
        let g = build_collab_graph(&o, 1).unwrap();
        let a = g.adjacency.to_dense();
        let want = [(0, 0, 2.0, 2.0), (0, 1, 2.0, 2.0), (1, 0, 1.0, 2.0), (2, 1, 1.0, 2.0)];
        for (u, i, du, di) in want {
            let v = 1.0 / f64::sqrt(du * di);
            assert!((a.get(u, 3 + i) as f64 - v).abs() < 1e-7);
            assert!((a.get(3 + i, u) as f64 - v).abs() < 1e-7);
            assert!((g.user_items.get(u, i) as f64 - v).abs() < 1e-7);
        }
        assert_eq!(a.get(1, 4), 0.0);
        assert_eq!(g.adjacency.nnz(), 8);
    }

    fn toy_graph() -> CollabGraph<f64> {
        let o = build_interaction_matrix(&[(0, 0), (0, 1), (1, 1)], 2, 2).unwrap();
        build_collab_graph(&o, 2).unwrap().cast()
    }

    #[test]
    fn propagation_matches_dense_powers() {
        let g = toy_graph();
        let e0 = Dense::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.1 - 0.4);
        let mut tape = Tape::new();
        let x = tape.constant(e0.clone());
        let out = propagate_collab(&mut tape, &g, x).unwrap();
        let a = g.adjacency.to_dense();
        let a1 = a.matmul(&e0).unwrap();
        let a2 = a.matmul(&a1).unwrap();
        let want = e0.add(&a1).unwrap().add(&a2).unwrap().scale(1.0 / 3.0);
        close(tape.value(out), &want, 1e-12);
    }

    #[test]
    fn zero_layers_and_isolated_graph() {
        let mut g = toy_graph();
        let e0 = Dense::from_fn(4, 2, |r, c| (r + 2 * c) as f64);
        g.layers = 0;
        let mut tape = Tape::new();
        let x = tape.constant(e0.clone());
        let out = propagate_collab(&mut tape, &g, x).unwrap();
        assert_eq!(tape.value(out), &e0);

        g.layers = 3;
        g.adjacency = Arc::new(Csr::zeros(4, 4));
        let out = propagate_collab(&mut tape, &g, x).unwrap();
        close(tape.value(out), &e0.scale(0.25), 1e-15);
        let short = tape.constant(Dense::zeros(3, 2));
        assert!(propagate_collab(&mut tape, &g, short).is_err());
    }

    #[test]
    fn identical_rows_are_mutual_neighbors() {
        let f = Dense::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, -3.0, 0.5]).unwrap();
        let g = build_semantic_graph(Modality::Visual, &f, 1).unwrap();
        assert!((g.knn.get(0, 1) - 1.0).abs() < 1e-6);
        assert!((g.knn.get(1, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_rows_break_ties_by_index() {
        let f = Dense::<f32>::identity(4);
        let g = build_semantic_graph(Modality::Textual, &f, 1).unwrap();
        let picks: Vec<usize> = (0..4).map(|a| g.knn.row(a).0[0]).collect();
        assert_eq!(picks, vec![1, 0, 0, 0]);
        assert!(g.knn.values().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn zero_rows_have_no_neighbors() {
        let f = Dense::from_vec(3, 2, vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let g = build_semantic_graph(Modality::Visual, &f, 2).unwrap();
        assert_eq!(g.knn.row_nnz(0), 0);
        assert!(g.knn.row(1).0 == [2] && g.knn.row(2).0 == [1]);
        assert!(g.adjacency.row(0).0.is_empty());
    }

    #[test]
    fn k_is_clamped() {
        let f = Dense::from_fn(3, 2, |r, c| (r + c + 1) as f32);
        let g = build_semantic_graph(Modality::Visual, &f, 10).unwrap();
        assert_eq!(g.k, 2);
        assert!((0..3).all(|a| g.knn.row_nnz(a) == 2));
        assert!(build_semantic_graph(Modality::Visual, &f, 0).is_err());
    }

    #[test]
    fn negative_neighbors_are_kept_and_normalized() {
        let f = Dense::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        let g = build_semantic_graph(Modality::Visual, &f, 1).unwrap();
        assert_eq!(g.knn.get(0, 1), -1.0);
        assert_eq!(g.adjacency.get(0, 1), -1.0);
    }

    #[test]
    fn normalized_adjacency_has_unit_spectral_bound() {
        let mut rng = crate::substrate::Rng::new(7);
        let f = Dense::from_fn(12, 5, |_, _| rng.gaussian() as f32);
        let g = build_semantic_graph(Modality::Visual, &f, 3).unwrap();
        let a = g.adjacency.to_dense().cast::<f64>();
        for r in 0..12 {
            assert_eq!(a.get(r, r), 0.0);
            for c in 0..12 {
                assert!((a.get(r, c) - a.get(c, r)).abs() < 1e-7);
            }
        }
        // power iteration on A² bounds the largest |eigenvalue|
        let mut v = Dense::filled(12, 1, 1.0);
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = a.matmul(&a.matmul(&v).unwrap()).unwrap();
            lambda = w.row_norms().iter().map(|x| x * x).sum::<f64>().sqrt()
                / v.row_norms().iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.scale(1.0 / w.max_abs());
        }
        assert!(lambda.sqrt() <= 1.0 + 1e-6, "{lambda}");
    }

    #[test]
    fn semantic_propagation_cases() {
        let id = SemanticGraph::<f64> {
            modality: Modality::Visual,
            k: 1,
            knn: Csr::zeros(3, 3),
            adjacency: Arc::new(Csr::identity(3)),
        };
        let x = Dense::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = propagate_semantic(&mut tape, &id, xv).unwrap();
        assert_eq!(tape.value(out), &x);

        let empty = SemanticGraph::<f64> {
            adjacency: Arc::new(Csr::zeros(3, 3)),
            ..id
        };
        let out = propagate_semantic(&mut tape, &empty, xv).unwrap();
        assert_eq!(tape.value(out), &Dense::zeros(3, 2));

        let mut rng = crate::substrate::Rng::new(3);
        let f = Dense::from_fn(5, 4, |_, _| rng.gaussian() as f32);
        let g = build_semantic_graph(Modality::Textual, &f, 2).unwrap().cast::<f64>();
        let x = Dense::from_fn(5, 3, |_, _| rng.gaussian());
        let xv = tape.constant(x.clone());
        let out = propagate_semantic(&mut tape, &g, xv).unwrap();
        close(tape.value(out), &g.adjacency.to_dense().matmul(&x).unwrap(), 1e-12);
    }

    #[test]
    fn user_pooling_cases() {
        // user 0: item 1 only (item 1 degree 1); user 1: none; user 2: items 0, 2
        let o = build_interaction_matrix(&[(0, 1), (2, 0), (2, 2), (3, 0)], 4, 3).unwrap();
        let g = build_collab_graph(&o, 2).unwrap().cast::<f64>();
        let items = Dense::from_fn(3, 2, |r, c| (r as f64 + 1.0) * if c == 0 { 1.0 } else { -0.5 });
        let mut tape = Tape::new();
        let iv = tape.constant(items.clone());
        let users = aggregate_user_modal(&mut tape, &g.user_items, iv).unwrap();
        let got = tape.value(users).clone();
        assert_eq!(got.row(0), items.row(1));
        assert_eq!(got.row(1), &[0.0, 0.0]);
        for c in 0..2 {
            let want = items.get(0, c) / (2.0 * 2.0f64).sqrt() + items.get(2, c) / 2.0f64.sqrt();
            assert!((got.get(2, c) - want).abs() < 1e-7);
        }
        // same as the user block of the normalized bipartite adjacency
        let a = g.adjacency.to_dense();
        let block = Dense::from_fn(4, 3, |u, i| a.get(u, 4 + i));
        close(&got, &block.matmul(&items).unwrap(), 1e-7);
    }

    #[test]
    fn triplet_files_round_trip_and_validate() {
        let mut rng = crate::substrate::Rng::new(5);
        let f = Dense::from_fn(6, 3, |_, _| rng.gaussian() as f32);
        let g = build_semantic_graph(Modality::Visual, &f, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("visual_knn.tsv");
        write_semantic_graph(&p, &g).unwrap();
        let back = read_semantic_graph(&p, Modality::Visual, 6, 2).unwrap();
        assert_eq!(back.knn, g.knn);
        assert_eq!(back.adjacency, g.adjacency);
        assert!(matches!(
            read_semantic_graph(&p, Modality::Visual, 6, 1),
            Err(Error::Parse { .. })
        ));
    }
}
