//! Overlap and surface-distance metrics on label masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabelMask;
use crate::error::{arg_err, Result};

fn check_pair(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(arg_err!("prediction shape {:?} vs ground truth {:?}", pred.dims(), gt.dims()));
    }
    Ok(())
}

fn overlap(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<(usize, usize, usize)> {
    check_pair(pred, gt)?;
    let (mut a, mut b, mut both) = (0, 0, 0);
    for (&p, &t) in pred.labels().iter().zip(gt.labels()) {
        let (p, t) = (p == class, t == class);
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    Ok((a, b, both))
}

/// `2|A∩B| / (|A|+|B|)` for one class; 1 when both are empty.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    let (a, b, both) = overlap(pred, gt, class)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|` for one class; 1 when both are empty.
pub fn jaccard(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    let (a, b, both) = overlap(pred, gt, class)?;
    let union = a + b - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

/// Voxels of `class` with a 6-connected neighbour of another class or lying
/// on the volume border, in `(z, y, x)` raster order.
pub fn extract_surface(mask: &LabelMask, class: u8) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let inside = |z: usize, y: usize, x: usize| mask.get(z, y, x) == class;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !inside(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if border
                    || !inside(z - 1, y, x)
                    || !inside(z + 1, y, x)
                    || !inside(z, y - 1, x)
                    || !inside(z, y + 1, x)
                    || !inside(z, y, x - 1)
                    || !inside(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn physical(p: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [p[0] as f64 * spacing[0], p[1] as f64 * spacing[1], p[2] as f64 * spacing[2]]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (dz, dy, dx) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dz * dz + dy * dy + dx * dx
}

/// For every point of `from`, the distance in mm to the nearest point of `to`.
///
/// `to` is sorted along z and scanned outward from the query's z until the
/// z gap alone exceeds the best distance found, which keeps the result
/// identical to an all-pairs search.
pub fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let mut targets: Vec<[f64; 3]> = to.iter().map(|&p| physical(p, spacing)).collect();
    targets.sort_by(|a, b| a[0].total_cmp(&b[0]));
    from.iter()
        .map(|&p| {
            let q = physical(p, spacing);
            let start = targets.partition_point(|t| t[0] < q[0]);
            let mut best = f64::INFINITY;
            for t in &targets[start..] {
                let gap = t[0] - q[0];
                if gap * gap > best {
                    break;
                }
                best = best.min(dist2(q, *t));
            }
            for t in targets[..start].iter().rev() {
                let gap = q[0] - t[0];
                if gap * gap > best {
                    break;
                }
                best = best.min(dist2(q, *t));
            }
            libm::sqrt(best)
        })
        .collect()
}

/// Nearest-rank percentile `q ∈ (0, 100]` of a non-empty list.
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = libm::ceil(q / 100.0 * sorted.len() as f64) as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Both directed distance lists between the class surfaces, or `None` when
/// either surface is empty.
pub fn surface_distances(pred: &LabelMask, gt: &LabelMask, class: u8, spacing: [f64; 3]) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_pair(pred, gt)?;
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(arg_err!("spacing must be positive, got {spacing:?}"));
    }
    let a = extract_surface(pred, class);
    let b = extract_surface(gt, class);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    Ok(Some((directed_distances(&a, &b, spacing), directed_distances(&b, &a, spacing))))
}

/// Maximum of the two directed 95th percentiles, in mm. `None` when a
/// surface is empty.
pub fn hd95(pred: &LabelMask, gt: &LabelMask, class: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt, class, spacing)?
        .map(|(ab, ba)| nearest_rank_percentile(&ab, 95.0).max(nearest_rank_percentile(&ba, 95.0))))
}

/// Mean of both directed distance lists pooled together, in mm. `None` when a
/// surface is empty.
pub fn asd(pred: &LabelMask, gt: &LabelMask, class: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt, class, spacing)?.map(|(ab, ba)| {
        let n = ab.len() + ba.len();
        (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / n as f64
    }))
}

/// Scores of one foreground class on one volume. Surface metrics are `None`
/// when undefined.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn score_class(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<ClassMetrics> {
    let spacing = gt.spacing();
    let distances = surface_distances(pred, gt, class, spacing)?;
    Ok(ClassMetrics {
        class,
        dice: dice_score(pred, gt, class)?,
        jaccard: jaccard(pred, gt, class)?,
        hd95: distances
            .as_ref()
            .map(|(ab, ba)| nearest_rank_percentile(ab, 95.0).max(nearest_rank_percentile(ba, 95.0))),
        asd: distances.map(|(ab, ba)| {
            (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64
        }),
    })
}

/// Per-volume scores averaged over the foreground classes.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VolumeMetrics {
    pub name: alloc::string::String,
    pub classes: Vec<ClassMetrics>,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = xs.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores every foreground class `1..K` of one volume. Spacing comes from the
/// ground truth.
pub fn score_volume(name: &str, pred: &LabelMask, gt: &LabelMask) -> Result<VolumeMetrics> {
    if pred.num_classes() != gt.num_classes() {
        return Err(arg_err!("prediction has {} classes, ground truth {}", pred.num_classes(), gt.num_classes()));
    }
    let classes = (1..gt.num_classes())
        .map(|c| score_class(pred, gt, c))
        .collect::<Result<Vec<_>>>()?;
    let n = classes.len().max(1) as f64;
    Ok(VolumeMetrics {
        name: name.into(),
        dice: classes.iter().map(|c| c.dice).sum::<f64>() / n,
        jaccard: classes.iter().map(|c| c.jaccard).sum::<f64>() / n,
        hd95: mean_defined(classes.iter().map(|c| c.hd95)),
        asd: mean_defined(classes.iter().map(|c| c.asd)),
        classes,
    })
}

/// Per-volume records plus their means. Undefined surface metrics are left
/// out of the means and counted in `undefined_surface`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub volumes: Vec<VolumeMetrics>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
    pub undefined_surface: usize,
}

impl MetricsReport {
    pub fn from_volumes(volumes: Vec<VolumeMetrics>) -> Self {
        let n = volumes.len().max(1) as f64;
        Self {
            mean_dice: volumes.iter().map(|v| v.dice).sum::<f64>() / n,
            mean_jaccard: volumes.iter().map(|v| v.jaccard).sum::<f64>() / n,
            mean_hd95: mean_defined(volumes.iter().map(|v| v.hd95)),
            mean_asd: mean_defined(volumes.iter().map(|v| v.asd)),
            undefined_surface: volumes.iter().filter(|v| v.hd95.is_none()).count(),
            volumes,
        }
    }
}
