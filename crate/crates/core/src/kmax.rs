//! Object queries updated by k-means cross-attention.
//!
//! Each block assigns every pixel to its highest-affinity query (hard argmax
//! over queries), moves each query by the mean of the pixels it owns, and
//! refines the queries with a residual per-query MLP. The assignment is a
//! constant for differentiation: gradients reach the pixel features through
//! the cluster means, never through the argmax.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, Result};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore, INIT_STD};
use crate::tensor::Tensor;

/// `N × C` cluster centres.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub queries: Tensor,
}

impl QuerySet {
    pub fn new(queries: Tensor) -> Result<Self> {
        queries.dims2()?;
        if !queries.all_finite() {
            return Err(arg_err!("query entries must be finite"));
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.queries.shape()[1]
    }
}

/// Flattened per-voxel features, one row per voxel of `origin_shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub data: Tensor,
    pub origin_shape: [usize; 3],
}

impl PixelFeatures {
    pub fn new(data: Tensor, origin_shape: [usize; 3]) -> Result<Self> {
        let (rows, _) = data.dims2()?;
        if rows != origin_shape.iter().product::<usize>() {
            return Err(arg_err!("{rows} pixel rows do not match shape {origin_shape:?}"));
        }
        Ok(Self { data, origin_shape })
    }

    /// Flattens a channels-first `(C, D, H, W)` feature volume.
    pub fn from_feature_map(map: &Tensor) -> Result<Self> {
        let &[c, d, h, w] = map.shape() else {
            return Err(arg_err!("expected (C, D, H, W), got {:?}", map.shape()));
        };
        let s = d * h * w;
        let mut data = vec![0.0; s * c];
        for ch in 0..c {
            for (i, v) in map.data()[ch * s..(ch + 1) * s].iter().enumerate() {
                data[i * c + ch] = *v;
            }
        }
        Self::new(Tensor::from_parts(vec![s, c], data), [d, h, w])
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Hard assignment of every pixel to exactly one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    owner: Vec<usize>,
    num_queries: usize,
}

impl ClusterAssignment {
    pub fn from_owners(owner: Vec<usize>, num_queries: usize) -> Result<Self> {
        if let Some(o) = owner.iter().find(|&&o| o >= num_queries) {
            return Err(arg_err!("owner {o} outside {num_queries} queries"));
        }
        Ok(Self { owner, num_queries })
    }

    /// Query index owning each pixel.
    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_pixels(&self) -> usize {
        self.owner.len()
    }

    /// Pixels owned by each query.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_queries];
        for &o in &self.owner {
            c[o] += 1;
        }
        c
    }

    /// Dense `HWD × N` one-hot matrix.
    pub fn to_dense(&self) -> Tensor {
        let n = self.num_queries;
        let mut data = vec![0.0; self.owner.len() * n];
        for (i, &o) in self.owner.iter().enumerate() {
            data[i * n + o] = 1.0;
        }
        Tensor::from_parts(vec![self.owner.len(), n], data)
    }
}

/// Argmax over queries of `queries · pixelsᵀ`, lowest index on ties.
fn assign_values(queries: &Tensor, pixels: &Tensor) -> Result<ClusterAssignment> {
    let (n, c) = queries.dims2()?;
    let (_, pc) = pixels.dims2()?;
    if c != pc {
        return Err(arg_err!("queries have {c} channels, pixels have {pc}"));
    }
    if n == 0 {
        return Err(arg_err!("at least one query is required"));
    }
    let owner = pixels
        .data()
        .chunks(c)
        .map(|p| {
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..n {
                let a: f64 = queries.row(j).iter().zip(p).map(|(x, y)| x * y).sum();
                if a > best.1 {
                    best = (j, a);
                }
            }
            best.0
        })
        .collect();
    Ok(ClusterAssignment { owner, num_queries: n })
}

pub fn cluster_assign(queries: &QuerySet, pixels: &PixelFeatures) -> Result<ClusterAssignment> {
    assign_values(&queries.queries, &pixels.data)
}

fn update_graph(g: &mut Graph, queries: Var, assignment: &ClusterAssignment, pixels: Var) -> Result<Var> {
    let (n, c) = g.value(queries).dims2()?;
    let (s, pc) = g.value(pixels).dims2()?;
    if pc != c || s != assignment.num_pixels() || n != assignment.num_queries() {
        return Err(arg_err!(
            "cluster update: queries {n}×{c}, pixels {s}×{pc}, assignment {}×{}",
            assignment.num_pixels(),
            assignment.num_queries()
        ));
    }
    let centres = g.cluster_mean(pixels, assignment.owners(), n)?;
    g.add(queries, centres)
}

/// Residual centroid step: each query plus the mean of the pixels it owns.
pub fn cluster_update(queries: &QuerySet, assignment: &ClusterAssignment, pixels: &PixelFeatures) -> Result<QuerySet> {
    let mut g = Graph::new();
    let q = g.constant(queries.queries.clone());
    let p = g.constant(pixels.data.clone());
    let out = update_graph(&mut g, q, assignment, p)?;
    QuerySet::new(g.value(out).clone())
}

/// Per-query residual MLP: `x + W2 · GELU(W1 · LN(x))`.
#[derive(Clone, Debug)]
pub struct QueryMlpParams {
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl QueryMlpParams {
    fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        let hidden = 2 * c;
        Self {
            norm_g: store.add(format!("{name}.norm.g"), Tensor::full(&[c], 1.0)),
            norm_b: store.add(format!("{name}.norm.b"), Tensor::zeros(&[c])),
            fc1_w: store.add(format!("{name}.fc1.w"), truncated_normal(rng, &[c, hidden], INIT_STD)),
            fc1_b: store.add(format!("{name}.fc1.b"), Tensor::zeros(&[hidden])),
            fc2_w: store.add(format!("{name}.fc2.w"), Tensor::zeros(&[hidden, c])),
            fc2_b: store.add(format!("{name}.fc2.b"), Tensor::zeros(&[c])),
        }
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let h = g.layer_norm_rows(x, bound[self.norm_g], bound[self.norm_b])?;
        let h = g.matmul(h, bound[self.fc1_w])?;
        let h = g.add_column_bias(h, bound[self.fc1_b])?;
        let h = g.gelu(h);
        let h = g.matmul(h, bound[self.fc2_w])?;
        let h = g.add_column_bias(h, bound[self.fc2_b])?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmaxConfig {
    pub num_queries: usize,
    pub channels: usize,
    pub rounds_per_tap: usize,
    /// One MLP reused at every tap, or one per tap.
    pub share_mlp: bool,
}

/// Learnable initial queries and the block MLPs.
#[derive(Clone, Debug)]
pub struct KmaxDecoder {
    pub config: KmaxConfig,
    pub queries: ParamId,
    pub mlps: Vec<QueryMlpParams>,
}

/// Graph handles and assignments produced by [`KmaxDecoder::run_graph`].
#[derive(Clone, Debug)]
pub struct StackOutput {
    pub queries: Var,
    /// Query state after every block, in application order.
    pub snapshots: Vec<Var>,
    pub assignments: Vec<ClusterAssignment>,
}

pub const NUM_TAPS: usize = 3;

impl KmaxDecoder {
    pub fn build<R: Rng>(config: KmaxConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.num_queries == 0 || config.channels == 0 {
            return Err(arg_err!("kmax decoder needs at least one query and one channel"));
        }
        let queries = store.add(
            "kmax.queries",
            truncated_normal(rng, &[config.num_queries, config.channels], INIT_STD),
        );
        let count = if config.share_mlp { 1 } else { NUM_TAPS };
        let mlps = (0..count)
            .map(|i| QueryMlpParams::build(store, rng, &format!("kmax.mlp{i}"), config.channels))
            .collect();
        Ok(Self { config, queries, mlps })
    }

    fn mlp_for(&self, tap: usize) -> &QueryMlpParams {
        &self.mlps[if self.config.share_mlp { 0 } else { tap }]
    }

    /// One assign → update → MLP block. A `frozen` assignment replaces the
    /// argmax, which lets gradient oracles hold assignments fixed.
    pub fn block_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        tap: usize,
        queries: Var,
        pixels: Var,
        frozen: Option<&ClusterAssignment>,
    ) -> Result<(Var, ClusterAssignment)> {
        let assignment = match frozen {
            Some(a) => a.clone(),
            None => assign_values(g.value(queries), g.value(pixels))?,
        };
        let updated = update_graph(g, queries, &assignment, pixels)?;
        let out = self.mlp_for(tap).forward(g, bound, updated)?;
        Ok((out, assignment))
    }

    /// Applies `rounds_per_tap` blocks per tap, taps ordered coarse to fine.
    /// Tap nodes are `(C, d, h, w)` feature volumes.
    pub fn run_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        initial: Var,
        taps: &[Var],
        frozen: Option<&[ClusterAssignment]>,
    ) -> Result<StackOutput> {
        if taps.is_empty() {
            return Err(arg_err!("the decoder stack needs at least one tap"));
        }
        let rounds = self.config.rounds_per_tap;
        if let Some(f) = frozen {
            if f.len() != taps.len() * rounds {
                return Err(arg_err!("{} frozen assignments for {} blocks", f.len(), taps.len() * rounds));
            }
        }
        let mut q = initial;
        let mut snapshots = Vec::with_capacity(taps.len() * rounds);
        let mut assignments = Vec::with_capacity(taps.len() * rounds);
        for (t, &tap) in taps.iter().enumerate() {
            let pixels = flatten_pixels(g, tap)?;
            for r in 0..rounds {
                let fixed = frozen.map(|f| &f[t * rounds + r]);
                let (next, a) = self.block_graph(g, bound, t.min(NUM_TAPS - 1), q, pixels, fixed)?;
                q = next;
                snapshots.push(q);
                assignments.push(a);
            }
        }
        Ok(StackOutput { queries: q, snapshots, assignments })
    }

    /// Value-level [`KmaxDecoder::block_graph`] for tap `tap`.
    pub fn block(&self, store: &ParamStore, tap: usize, queries: &QuerySet, pixels: &PixelFeatures) -> Result<QuerySet> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let q = g.constant(queries.queries.clone());
        let p = g.constant(pixels.data.clone());
        let (out, _) = self.block_graph(&mut g, &bound, tap, q, p, None)?;
        QuerySet::new(g.value(out).clone())
    }

    /// Value-level decoder stack: final queries plus one snapshot per block.
    pub fn run_decoder_stack(
        &self,
        store: &ParamStore,
        initial: &QuerySet,
        taps: &[PixelFeatures],
    ) -> Result<(QuerySet, Vec<QuerySet>)> {
        if taps.is_empty() {
            return Err(arg_err!("the decoder stack needs at least one tap"));
        }
        let mut q = initial.clone();
        let mut snapshots = Vec::new();
        for (t, tap) in taps.iter().enumerate() {
            for _ in 0..self.config.rounds_per_tap {
                q = self.block(store, t.min(NUM_TAPS - 1), &q, tap)?;
                snapshots.push(q.clone());
            }
        }
        Ok((q, snapshots))
    }
}

/// `(C, d, h, w)` volume node → `(dhw, C)` pixel matrix node.
pub fn flatten_pixels(g: &mut Graph, map: Var) -> Result<Var> {
    let shape = g.shape(map).to_vec();
    if shape.len() != 4 {
        return Err(arg_err!("expected a (C, D, H, W) feature map, got {shape:?}"));
    }
    let s = shape[1..].iter().product();
    let flat = g.reshape(map, &[shape[0], s])?;
    g.transpose(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{analytic_grad, max_rel_error, numeric_grad, pseudo_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qs(rows: &[&[f64]]) -> QuerySet {
        QuerySet::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn px(rows: &[&[f64]]) -> PixelFeatures {
        PixelFeatures::new(Tensor::from_rows(rows).unwrap(), [rows.len(), 1, 1]).unwrap()
    }

    fn decoder(n: usize, c: usize, rounds: usize, share: bool) -> (KmaxDecoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = KmaxConfig { num_queries: n, channels: c, rounds_per_tap: rounds, share_mlp: share };
        let dec = KmaxDecoder::build(cfg, &mut store, &mut rng).unwrap();
        (dec, store)
    }

    #[test]
    fn hand_computed_assignment_and_update() {
        let q = qs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = px(&[&[2.0, 0.0], &[0.0, 3.0], &[1.0, 1.0]]);
        let a = cluster_assign(&q, &p).unwrap();
        // pixel 2 ties 1 vs 1 and goes to the lower index
        assert_eq!(a.owners(), &[0, 1, 0]);
        let u = cluster_update(&q, &a, &p).unwrap();
        assert_eq!(u.queries.data(), &[1.0 + 1.5, 0.5, 0.0, 1.0 + 3.0]);
    }

    #[test]
    fn single_query_owns_everything() {
        let q = qs(&[&[0.3, -0.2]]);
        let p = px(&[&[2.0, 0.0], &[-1.0, 3.0], &[1.0, 1.0]]);
        let a = cluster_assign(&q, &p).unwrap();
        assert_eq!(a.to_dense().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_cluster_keeps_its_query() {
        let q = qs(&[&[1.0, 0.0], &[0.0, 1.0], &[-5.0, -5.0]]);
        let p = px(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let a = cluster_assign(&q, &p).unwrap();
        assert_eq!(a.counts(), vec![1, 1, 0]);
        let u = cluster_update(&q, &a, &p).unwrap();
        assert_eq!(u.queries.row(2), &[-5.0, -5.0]);
    }

    #[test]
    fn zero_pixels_leave_queries_unchanged() {
        let q = qs(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = px(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let a = cluster_assign(&q, &p).unwrap();
        assert_eq!(cluster_update(&q, &a, &p).unwrap(), q);
    }

    #[test]
    fn channel_mismatch_is_an_argument_error() {
        let q = qs(&[&[1.0, 0.0, 0.0]]);
        let p = px(&[&[2.0, 0.0]]);
        assert!(matches!(cluster_assign(&q, &p), Err(crate::Error::Argument(_))));
        let a = ClusterAssignment::from_owners(vec![0], 1).unwrap();
        assert!(cluster_update(&q, &a, &p).is_err());
    }

    #[test]
    fn fresh_block_equals_cluster_update() {
        let (dec, store) = decoder(3, 4, 1, true);
        let q = QuerySet::new(pseudo_tensor(&[3, 4], 1)).unwrap();
        let p = PixelFeatures::new(pseudo_tensor(&[10, 4], 2), [10, 1, 1]).unwrap();
        let a = cluster_assign(&q, &p).unwrap();
        let expected = cluster_update(&q, &a, &p).unwrap();
        assert_eq!(dec.block(&store, 0, &q, &p).unwrap(), expected);
    }

    #[test]
    fn repeated_blocks_reach_a_fixed_assignment() {
        let (dec, store) = decoder(3, 2, 1, true);
        let mut q = QuerySet::new(pseudo_tensor(&[3, 2], 11)).unwrap();
        let p = PixelFeatures::new(pseudo_tensor(&[8, 2], 12), [8, 1, 1]).unwrap();
        let mut history = vec![cluster_assign(&q, &p).unwrap()];
        for _ in 0..50 {
            q = dec.block(&store, 0, &q, &p).unwrap();
            history.push(cluster_assign(&q, &p).unwrap());
        }
        let last = history.last().unwrap();
        let settled = history.iter().rposition(|a| a != last).map_or(0, |i| i + 1);
        assert!(settled < 40, "assignments still changing at iteration {settled}");
    }

    #[test]
    fn zero_rounds_is_identity() {
        let (dec, store) = decoder(4, 3, 0, true);
        let q = QuerySet::new(pseudo_tensor(&[4, 3], 3)).unwrap();
        let taps: Vec<PixelFeatures> =
            (0..3).map(|i| PixelFeatures::new(pseudo_tensor(&[6, 3], 20 + i), [6, 1, 1]).unwrap()).collect();
        let (out, snaps) = dec.run_decoder_stack(&store, &q, &taps).unwrap();
        assert_eq!(out, q);
        assert!(snaps.is_empty());
        assert!(dec.run_decoder_stack(&store, &q, &[]).is_err());
    }

    #[test]
    fn snapshot_count_is_taps_times_rounds() {
        let (dec, store) = decoder(4, 3, 2, false);
        let q = QuerySet::new(pseudo_tensor(&[4, 3], 3)).unwrap();
        let taps: Vec<PixelFeatures> =
            (0..3).map(|i| PixelFeatures::new(pseudo_tensor(&[6, 3], 30 + i), [6, 1, 1]).unwrap()).collect();
        let (_, snaps) = dec.run_decoder_stack(&store, &q, &taps).unwrap();
        assert_eq!(snaps.len(), 6);
    }

    #[test]
    fn gradient_under_frozen_assignment() {
        let (dec, store) = decoder(3, 4, 1, true);
        // open the MLP's last layer so it contributes to the gradient
        let mut params: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        let fc2 = dec.mlps[0].fc2_w;
        let idx = store.iter().position(|p| p.name.ends_with("fc2.w")).unwrap();
        params[idx] = pseudo_tensor(store.get(fc2).shape(), 5);
        let pixels = pseudo_tensor(&[12, 4], 6);
        let q0 = store.get(dec.queries).clone();
        let frozen = assign_values(&q0, &pixels).unwrap();
        let readout = pseudo_tensor(&[3, 4], 7);
        let mut inputs = params.clone();
        inputs.push(pixels);
        let f = |g: &mut Graph, v: &[Var]| {
            let bound = Bound::from_vars(v[..v.len() - 1].to_vec());
            let p = v[v.len() - 1];
            let (out, _) = dec.block_graph(g, &bound, 0, bound[dec.queries], p, Some(&frozen))?;
            let w = g.constant(readout.clone());
            let y = g.mul(out, w)?;
            let y = g.mul(y, out)?;
            Ok(g.sum(y))
        };
        let a = analytic_grad(&inputs, &f);
        let n = numeric_grad(&inputs, &f, 1e-5);
        assert!(max_rel_error(&a, &n) < 1e-4);
    }
}
