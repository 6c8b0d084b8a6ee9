//! Query responses, mask prediction, cluster classification and their
//! aggregation into per-voxel class probabilities.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::LabelMask;
use crate::error::{arg_err, numeric_err, Result};
use crate::kmax::{PixelFeatures, QuerySet};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore, INIT_STD};
use crate::tensor::Tensor;

/// Soft query membership per voxel (`HWD × N`, rows sum to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub probs: Tensor,
}

/// Per-query class distribution (`N × K`) and the logits it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterClassification {
    pub probs: Tensor,
    pub logits: Tensor,
}

/// Per-voxel class probabilities (`HWD × K`).
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub probs: Tensor,
    pub origin_shape: [usize; 3],
}

impl Segmentation {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Most probable class per voxel, lowest index on ties.
    pub fn argmax_labels(&self) -> Vec<u8> {
        self.probs
            .data()
            .chunks(self.num_classes())
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn to_label_mask(&self, spacing: [f64; 3]) -> Result<LabelMask> {
        LabelMask::new(self.origin_shape, spacing, self.num_classes() as u8, self.argmax_labels())
    }
}

fn eval1(input: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// `R = P · Cᵀ`, raw logits of shape `HWD × N`.
pub fn query_response(pixels: &PixelFeatures, queries: &QuerySet) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(pixels.data.clone());
    let q = g.constant(queries.queries.clone());
    let r = g.matmul_bt(p, q)?;
    Ok(g.value(r).clone())
}

/// Row-wise softmax over queries.
pub fn mask_predict(response: &Tensor) -> Result<MaskPrediction> {
    if !response.all_finite() {
        return Err(numeric_err!("query responses contain non-finite values"));
    }
    Ok(MaskPrediction { probs: eval1(response, |g, x| g.softmax_rows(x))? })
}

/// `Y = M · C_k`.
pub fn aggregate(mask: &MaskPrediction, classes: &ClusterClassification, origin_shape: [usize; 3]) -> Result<Segmentation> {
    let mut g = Graph::new();
    let m = g.constant(mask.probs.clone());
    let c = g.constant(classes.probs.clone());
    let y = g.matmul(m, c)?;
    let probs = g.value(y).clone();
    if probs.shape()[0] != origin_shape.iter().product::<usize>() {
        return Err(arg_err!("{} voxels do not match shape {origin_shape:?}", probs.shape()[0]));
    }
    Ok(Segmentation { probs, origin_shape })
}

/// Two-layer MLP shared across queries: `C → C → K`.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub num_classes: usize,
}

/// Graph handles of the postprocessing outputs for one view.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `HWD × N` mask prediction.
    pub mask: Var,
    /// `N × K` query distribution logits.
    pub logits: Var,
    /// `HWD × K` segmentation probabilities.
    pub segmentation: Var,
}

impl ClassifierParams {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: usize, num_classes: usize) -> Self {
        Self {
            fc1_w: store.add("cls.fc1.w", truncated_normal(rng, &[channels, channels], INIT_STD)),
            fc1_b: store.add("cls.fc1.b", Tensor::zeros(&[channels])),
            fc2_w: store.add("cls.fc2.w", truncated_normal(rng, &[channels, num_classes], INIT_STD)),
            fc2_b: store.add("cls.fc2.b", Tensor::zeros(&[num_classes])),
            num_classes,
        }
    }

    /// `N × K` logits.
    pub fn logits_graph(&self, g: &mut Graph, bound: &Bound, queries: Var) -> Result<Var> {
        let h = g.matmul(queries, bound[self.fc1_w])?;
        let h = g.add_column_bias(h, bound[self.fc1_b])?;
        let h = g.gelu(h);
        let h = g.matmul(h, bound[self.fc2_w])?;
        g.add_column_bias(h, bound[self.fc2_b])
    }

    /// Full postprocessing chain on `(HWD, C)` pixels and `(N, C)` queries.
    pub fn head_graph(&self, g: &mut Graph, bound: &Bound, pixels: Var, queries: Var) -> Result<HeadOutput> {
        let response = g.matmul_bt(pixels, queries)?;
        let mask = g.softmax_rows(response)?;
        let logits = self.logits_graph(g, bound, queries)?;
        let class_probs = g.softmax_rows(logits)?;
        let segmentation = g.matmul(mask, class_probs)?;
        Ok(HeadOutput { mask, logits, segmentation })
    }

    pub fn classify_clusters(&self, store: &ParamStore, queries: &QuerySet) -> Result<ClusterClassification> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let q = g.constant(queries.queries.clone());
        let logits = self.logits_graph(&mut g, &bound, q)?;
        let probs = g.softmax_rows(logits)?;
        Ok(ClusterClassification { probs: g.value(probs).clone(), logits: g.value(logits).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_grad, pseudo_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row_sums(t: &Tensor) -> Vec<f64> {
        let c = t.shape()[1];
        t.data().chunks(c).map(|r| r.iter().sum()).collect()
    }

    #[test]
    fn response_of_orthonormal_queries() {
        let q = QuerySet::new(Tensor::from_rows(&[&[2.0, 0.0, 0.0], &[0.0, 3.0, 0.0]]).unwrap()).unwrap();
        let p = PixelFeatures::new(Tensor::from_rows(&[&[0.0, 3.0, 0.0], &[0.0; 3]]).unwrap(), [2, 1, 1]).unwrap();
        let r = query_response(&p, &q).unwrap();
        assert_eq!(r.data(), &[0.0, 9.0, 0.0, 0.0]);
    }

    #[test]
    fn response_is_transposed_affinity() {
        let q = QuerySet::new(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()).unwrap();
        let p = PixelFeatures::new(Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 3.0], &[1.0, 1.0]]).unwrap(), [3, 1, 1])
            .unwrap();
        let r = query_response(&p, &q).unwrap();
        assert_eq!(r.data(), &[2.0, 0.0, 0.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let m = mask_predict(&Tensor::from_rows(&[&[0.0, 0.0, 0.0, 0.0], &[1.0, 2.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert!(m.probs.row(0).iter().all(|v| (v - 0.25).abs() < 1e-15));
        let two = mask_predict(&Tensor::from_rows(&[&[1.0, 2.0]]).unwrap()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((two.probs.data()[0] - sig(-1.0)).abs() < 1e-15);
        assert!((two.probs.data()[1] - sig(1.0)).abs() < 1e-15);
        assert!((two.probs.data()[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let mut last = 0.0;
        for t in [0.0, 1.0, 5.0, 20.0, 200.0] {
            let p = mask_predict(&Tensor::from_rows(&[&[t, 0.0, 0.0]]).unwrap()).unwrap().probs.data()[0];
            assert!(p >= last);
            last = p;
        }
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_response_is_rejected() {
        let r = Tensor::from_rows(&[&[f64::NAN, 0.0]]).unwrap();
        assert!(matches!(mask_predict(&r), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut store = ParamStore::new();
        let cls = ClassifierParams::build(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 4, 3);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let q = QuerySet::new(pseudo_tensor(&[5, 4], 1)).unwrap();
        let out = cls.classify_clusters(&store, &q).unwrap();
        assert!(out.probs.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn classifier_rows_follow_query_permutation() {
        let mut store = ParamStore::new();
        let cls = ClassifierParams::build(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 4, 3);
        let q = pseudo_tensor(&[3, 4], 2);
        let perm = [2usize, 0, 1];
        let permuted: Vec<&[f64]> = perm.iter().map(|&i| q.row(i)).collect();
        let a = cls.classify_clusters(&store, &QuerySet::new(q.clone()).unwrap()).unwrap();
        let b = cls.classify_clusters(&store, &QuerySet::new(Tensor::from_rows(&permuted).unwrap()).unwrap()).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.logits.row(i), b.logits.row(j));
        }
    }

    #[test]
    fn aggregation_of_indicators_and_uniform_masks() {
        let mask = MaskPrediction { probs: Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap() };
        let cls = ClusterClassification {
            probs: Tensor::from_rows(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]).unwrap(),
            logits: Tensor::zeros(&[2, 3]),
        };
        let seg = aggregate(&mask, &cls, [2, 1, 1]).unwrap();
        assert_eq!(seg.argmax_labels(), vec![2, 0]);
        let uniform = MaskPrediction { probs: Tensor::full(&[2, 2], 0.5) };
        let seg = aggregate(&uniform, &cls, [2, 1, 1]).unwrap();
        assert_eq!(seg.probs.row(0), &[0.5, 0.0, 0.5]);
        assert!(aggregate(&uniform, &cls, [3, 1, 1]).is_err());
    }

    #[test]
    fn segmentation_rows_sum_to_one() {
        let m = mask_predict(&pseudo_tensor(&[20, 5], 3)).unwrap();
        let logits = pseudo_tensor(&[5, 3], 4);
        let cls = ClusterClassification { probs: mask_predict(&logits).unwrap().probs, logits };
        let seg = aggregate(&m, &cls, [20, 1, 1]).unwrap();
        for s in row_sums(&seg.probs).into_iter().chain(row_sums(&m.probs)).chain(row_sums(&cls.probs)) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_gradient() {
        let mut store = ParamStore::new();
        let cls = ClassifierParams::build(&mut store, &mut ChaCha8Rng::seed_from_u64(2), 4, 3);
        let mut inputs: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        inputs.push(pseudo_tensor(&[5, 4], 5));
        let target = pseudo_tensor(&[5, 3], 6);
        check_grad(&inputs, |g, v| {
            let bound = Bound::from_vars(v[..4].to_vec());
            let logits = cls.logits_graph(g, &bound, v[4])?;
            let p = g.softmax_rows(logits)?;
            let t = g.constant(target.clone());
            let y = g.mul(p, t)?;
            Ok(g.sum(y))
        });
    }
}
