//! Soft-IoU loss, pixel metrics, object-level detection/false-alarm rates via
//! connected components, and ROC/AUC.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-pixel boolean image.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("mask data length {} != {h}x{w}", data.len())));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask { h, w, data: vec![false; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Threshold one channel plane of a tensor: mask = value > threshold.
    pub fn from_plane<T: Real>(plane: &[T], h: usize, w: usize, threshold: T) -> Result<Self> {
        if plane.len() != h * w {
            return Err(Error::Shape(format!("plane length {} != {h}x{w}", plane.len())));
        }
        Ok(BinaryMask { h, w, data: plane.iter().map(|&v| v > threshold).collect() })
    }
}

/// Soft intersection-over-union loss on plain tensors:
/// 1 - sum(x*y) / sum(x + y - x*y). Zero when both maps are empty.
pub fn soft_iou_loss<T: Real>(conf: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    if conf.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "soft_iou: confidence {} vs ground truth {}",
            conf.shape(),
            gt.shape()
        )));
    }
    let mut inter = T::ZERO;
    let mut union = T::ZERO;
    for (&x, &y) in conf.data().iter().zip(gt.data()) {
        inter += x * y;
        union += x + y - x * y;
    }
    Ok(if union > T::ZERO { T::ONE - inter / union } else { T::ZERO })
}

/// One 8-connected component of a mask.
#[derive(Clone, Debug)]
pub struct Component {
    /// Dense 1-based label.
    pub label: u32,
    pub pixels: usize,
    pub centroid: (f64, f64),
    /// First pixel in row-major order, used for deterministic tie-breaks.
    pub first_pixel: (usize, usize),
}

/// Label map plus component list; label 0 is background.
#[derive(Clone, Debug)]
pub struct ComponentSet {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// 8-connected component labeling with labels assigned in row-major order of
/// each component's first pixel.
pub fn connected_components(mask: &BinaryMask) -> ComponentSet {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut queue: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        labels[start] = label;
        queue.clear();
        queue.push(start);
        let mut pixels = 0usize;
        let mut sum_y = 0.0f64;
        let mut sum_x = 0.0f64;
        let mut head = 0;
        while head < queue.len() {
            let idx = queue[head];
            head += 1;
            pixels += 1;
            let (y, x) = (idx / w, idx % w);
            sum_y += y as f64;
            sum_x += x as f64;
            let y0 = y.saturating_sub(1);
            let x0 = x.saturating_sub(1);
            for ny in y0..=(y + 1).min(h - 1) {
                for nx in x0..=(x + 1).min(w - 1) {
                    let nidx = ny * w + nx;
                    if mask.data[nidx] && labels[nidx] == 0 {
                        labels[nidx] = label;
                        queue.push(nidx);
                    }
                }
            }
        }
        components.push(Component {
            label,
            pixels,
            centroid: (sum_y / pixels as f64, sum_x / pixels as f64),
            first_pixel: (start / w, start % w),
        });
    }
    ComponentSet { h, w, labels, components }
}

/// Accumulated true-positive / ground-truth / predicted pixel counts.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub t: u64,
    pub p: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.t += other.t;
        self.p += other.p;
    }

    /// TP / (T + P - TP); an empty-vs-empty pair counts as perfect agreement.
    pub fn iou(&self) -> f64 {
        let denom = self.t + self.p - self.tp;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// Pixel confusion counts of one image pair.
pub fn pixel_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::Shape(format!(
            "pixel_metrics: prediction {}x{} vs ground truth {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g {
            c.t += 1;
        }
        if p {
            c.p += 1;
        }
        if p && g {
            c.tp += 1;
        }
    }
    Ok(c)
}

/// Dataset intersection-over-union from accumulated counts.
pub fn dataset_iou(per_image: &[ConfusionCounts]) -> f64 {
    let mut total = ConfusionCounts::default();
    for c in per_image {
        total.add(c);
    }
    total.iou()
}

/// Mean of per-image intersection-over-union values.
pub fn niou(per_image: &[ConfusionCounts]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::Usage("niou over an empty image list".into()));
    }
    Ok(per_image.iter().map(|c| c.iou()).sum::<f64>() / per_image.len() as f64)
}

/// How predicted components are matched to ground-truth components.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum MatchRule {
    /// A prediction matches the ground-truth component it shares the most
    /// pixels with (ties broken by the component whose first pixel comes
    /// first in row-major order).
    PixelOverlap,
    /// A prediction matches the nearest ground-truth centroid within the
    /// given distance in pixels.
    CentroidDistance(f64),
}

/// Object-level detection statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PdFa {
    /// Detected ground-truth components / total ground-truth components.
    pub pd: f64,
    /// False predicted components per image.
    pub fa_per_image: f64,
    /// False predicted pixels per 10^6 pixels.
    pub fa_per_megapixel: f64,
    pub detected_targets: u64,
    pub total_targets: u64,
    pub false_components: u64,
    pub false_pixels: u64,
}

/// Object-level probability of detection and false-alarm rates over paired
/// mask lists.
pub fn pd_fa(preds: &[BinaryMask], gts: &[BinaryMask], rule: MatchRule) -> Result<PdFa> {
    if preds.len() != gts.len() {
        return Err(Error::Usage(format!(
            "pd_fa: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Usage("pd_fa over an empty image list".into()));
    }
    let mut total_targets = 0u64;
    let mut detected = 0u64;
    let mut false_components = 0u64;
    let mut false_pixels = 0u64;
    let mut total_pixels = 0u64;
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::Usage(format!(
                "pd_fa: prediction {}x{} vs ground truth {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        total_pixels += (pred.h * pred.w) as u64;
        let gt_cc = connected_components(gt);
        let pred_cc = connected_components(pred);
        total_targets += gt_cc.len() as u64;
        let mut gt_hit = vec![false; gt_cc.len()];
        for pc in &pred_cc.components {
            // overlap pixel counts against every ground-truth component
            let mut overlaps = vec![0u64; gt_cc.len()];
            for idx in 0..pred_cc.labels.len() {
                if pred_cc.labels[idx] == pc.label && gt_cc.labels[idx] != 0 {
                    overlaps[(gt_cc.labels[idx] - 1) as usize] += 1;
                }
            }
            let matched = match rule {
                MatchRule::PixelOverlap => {
                    // any shared pixel marks that target as detected
                    for (gi, &ov) in overlaps.iter().enumerate() {
                        if ov > 0 {
                            gt_hit[gi] = true;
                        }
                    }
                    // the prediction itself is assigned to its largest overlap
                    let mut best: Option<usize> = None;
                    for (gi, &ov) in overlaps.iter().enumerate() {
                        if ov == 0 {
                            continue;
                        }
                        best = Some(match best {
                            None => gi,
                            Some(b) => {
                                if ov > overlaps[b]
                                    || (ov == overlaps[b]
                                        && gt_cc.components[gi].first_pixel
                                            < gt_cc.components[b].first_pixel)
                                {
                                    gi
                                } else {
                                    b
                                }
                            }
                        });
                    }
                    best.is_some()
                }
                MatchRule::CentroidDistance(max_d) => {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, g) in gt_cc.components.iter().enumerate() {
                        let dy = g.centroid.0 - pc.centroid.0;
                        let dx = g.centroid.1 - pc.centroid.1;
                        let d = (dy * dy + dx * dx).sqrt();
                        if d <= max_d && best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((gi, d));
                        }
                    }
                    if let Some((gi, _)) = best {
                        gt_hit[gi] = true;
                        true
                    } else {
                        false
                    }
                }
            };
            if !matched {
                false_components += 1;
                false_pixels += pc.pixels as u64;
            }
        }
        detected += gt_hit.iter().filter(|&&v| v).count() as u64;
    }
    let pd = if total_targets == 0 { 1.0 } else { detected as f64 / total_targets as f64 };
    Ok(PdFa {
        pd,
        fa_per_image: false_components as f64 / preds.len() as f64,
        fa_per_megapixel: false_pixels as f64 / total_pixels as f64 * 1e6,
        detected_targets: detected,
        total_targets,
        false_components,
        false_pixels,
    })
}

/// Pixel-level ROC curve over pooled (score, label) pairs plus the
/// trapezoidal area under it. Points are (fpr, tpr) for a descending sweep
/// across all unique score values.
pub fn roc_auc<T: Real>(pairs: &[(&Tensor<T>, &BinaryMask)]) -> Result<(Vec<(f64, f64)>, f64)> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (conf, gt) in pairs {
        let s = conf.shape();
        if s.c != 1 || s.h != gt.h || s.w != gt.w {
            return Err(Error::Usage(format!(
                "roc_auc: confidence {} vs mask {}x{}",
                s, gt.h, gt.w
            )));
        }
        for n in 0..s.n {
            for (v, &label) in conf.plane(n, 0).iter().zip(&gt.data) {
                scored.push((v.to_f64(), label));
            }
        }
    }
    let pos = scored.iter().filter(|(_, l)| *l).count() as f64;
    let neg = scored.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Usage(
            "roc_auc needs at least one positive and one negative pixel".into(),
        ));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut prev_fpr, mut prev_tpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < scored.len() {
        // consume the whole tie group at this score value
        let v = scored[i].0;
        while i < scored.len() && scored[i].0 == v {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos;
        let fpr = fp as f64 / neg;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push((fpr, tpr));
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    Ok((points, auc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn soft_iou_hand_cases() {
        let gt = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(soft_iou_loss(&gt, &gt).unwrap(), 0.0);

        let ones = Tensor::full(Shape::new(1, 1, 2, 2), 1.0f64);
        let zeros = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert_eq!(soft_iou_loss(&ones, &zeros).unwrap(), 1.0);

        let half = Tensor::full(Shape::new(1, 1, 4, 4), 0.5f64);
        let all = Tensor::full(Shape::new(1, 1, 4, 4), 1.0f64);
        let loss = soft_iou_loss(&half, &all).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);

        assert!(matches!(
            soft_iou_loss(&ones, &Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn binary_soft_iou_matches_one_minus_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let pred_mask = BinaryMask::new(8, 8, (0..64).map(|_| rng.gen_bool(0.3)).collect()).unwrap();
            let gt_mask = BinaryMask::new(8, 8, (0..64).map(|_| rng.gen_bool(0.3)).collect()).unwrap();
            let to_tensor = |m: &BinaryMask| {
                Tensor::new(
                    Shape::new(1, 1, 8, 8),
                    m.data.iter().map(|&b| if b { 1.0f64 } else { 0.0 }).collect(),
                )
                .unwrap()
            };
            let loss = soft_iou_loss(&to_tensor(&pred_mask), &to_tensor(&gt_mask)).unwrap();
            let counts = pixel_metrics(&pred_mask, &gt_mask).unwrap();
            assert!((loss - (1.0 - counts.iou())).abs() < 1e-12);
        }
    }

    #[test]
    fn components_single_pixel_and_diagonal() {
        let m = mask_from(&["....", ".#..", "....", "...."]);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc.components[0].pixels, 1);

        // diagonal touch joins under 8-connectivity
        let m = mask_from(&["#...", ".#..", "....", "...."]);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc.components[0].pixels, 2);

        let m = mask_from(&["##..", "....", "..##", "..##"]);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 2);
        assert_eq!(cc.components[0].first_pixel, (0, 0));
        assert_eq!(cc.components[1].first_pixel, (2, 2));
        assert_eq!(cc.components[1].pixels, 4);
        assert_eq!(cc.components[1].centroid, (2.5, 2.5));
    }

    /// Brute-force reference labeling: repeated full-image sweeps propagating
    /// the minimum seed index until a fixpoint; independent of the BFS path.
    fn flood_fill_oracle(mask: &BinaryMask) -> Vec<u32> {
        let (h, w) = (mask.h, mask.w);
        let mut lab: Vec<u32> = (0..h * w)
            .map(|i| if mask.data[i] { i as u32 + 1 } else { 0 })
            .collect();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    let idx = y * w + x;
                    if lab[idx] == 0 {
                        continue;
                    }
                    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            let nidx = ny * w + nx;
                            if lab[nidx] != 0 && lab[nidx] < lab[idx] {
                                lab[idx] = lab[nidx];
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        lab
    }

    #[test]
    fn components_match_flood_fill_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..200 {
            let density = 0.2 + 0.4 * (case % 5) as f64 / 4.0;
            let m =
                BinaryMask::new(16, 16, (0..256).map(|_| rng.gen_bool(density)).collect()).unwrap();
            let cc = connected_components(&m);
            let oracle = flood_fill_oracle(&m);
            // same partition: two pixels share a label iff the oracle agrees
            let mut seen = std::collections::HashMap::new();
            let mut oracle_count = 0;
            for i in 0..256 {
                assert_eq!(cc.labels[i] == 0, oracle[i] == 0);
                if oracle[i] != 0 {
                    let e = seen.entry(oracle[i]).or_insert_with(|| {
                        oracle_count += 1;
                        cc.labels[i]
                    });
                    assert_eq!(*e, cc.labels[i], "partition mismatch in case {case}");
                }
            }
            assert_eq!(cc.len(), oracle_count, "component count mismatch in case {case}");
        }
    }

    #[test]
    fn pixel_metrics_cases() {
        let gt = mask_from(&["##..", "##..", "....", "...."]);
        let c = pixel_metrics(&gt, &gt).unwrap();
        assert_eq!(c.iou(), 1.0);

        let pred = mask_from(&[".#..", ".#..", ".#..", ".#.."]);
        let c = pixel_metrics(&pred, &gt).unwrap();
        assert_eq!((c.t, c.p, c.tp), (4, 4, 2));
        assert!((c.iou() - 2.0 / 6.0).abs() < 1e-12);

        let empty = BinaryMask::zeros(4, 4);
        let c = pixel_metrics(&empty, &empty).unwrap();
        assert_eq!(c.iou(), 1.0);
    }

    #[test]
    fn niou_cases() {
        let perfect = ConfusionCounts { tp: 4, t: 4, p: 4 };
        let half = ConfusionCounts { tp: 2, t: 3, p: 3 };
        assert!((niou(&[perfect, half]).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(niou(&[perfect, perfect]).unwrap(), 1.0);
        assert_eq!(niou(&[half]).unwrap(), half.iou());
        assert!(matches!(niou(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn pd_fa_hand_cases() {
        let gt = mask_from(&["##......", "##......", "........", "......##"]);
        // perfect prediction: two targets, both found
        let r = pd_fa(
            std::slice::from_ref(&gt),
            std::slice::from_ref(&gt),
            MatchRule::PixelOverlap,
        )
        .unwrap();
        assert_eq!(r.pd, 1.0);
        assert_eq!(r.fa_per_image, 0.0);
        assert_eq!(r.fa_per_megapixel, 0.0);

        // miss one of two targets
        let pred = mask_from(&["##......", "##......", "........", "........"]);
        let r = pd_fa(&[pred], std::slice::from_ref(&gt), MatchRule::PixelOverlap).unwrap();
        assert_eq!(r.pd, 0.5);

        // one spurious 3-pixel blob on an empty 100x100 scene
        let mut spur = BinaryMask::zeros(100, 100);
        spur.data[50 * 100 + 50] = true;
        spur.data[50 * 100 + 51] = true;
        spur.data[51 * 100 + 50] = true;
        let gt_one = {
            let mut m = BinaryMask::zeros(100, 100);
            m.data[10 * 100 + 10] = true;
            m
        };
        let r = pd_fa(&[spur], &[gt_one], MatchRule::PixelOverlap).unwrap();
        assert_eq!(r.fa_per_image, 1.0);
        assert!((r.fa_per_megapixel - 300.0).abs() < 1e-9);
        assert_eq!(r.pd, 0.0);
    }

    #[test]
    fn spurious_blob_never_increases_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = BinaryMask::new(16, 16, (0..256).map(|_| rng.gen_bool(0.05)).collect()).unwrap();
            let pred =
                BinaryMask::new(16, 16, (0..256).map(|_| rng.gen_bool(0.05)).collect()).unwrap();
            let base = pd_fa(
                std::slice::from_ref(&pred),
                std::slice::from_ref(&gt),
                MatchRule::PixelOverlap,
            )
            .unwrap();
            // add a blob in a spot far from everything only if actually empty there
            let mut spiked = pred.clone();
            if !spiked.data[0] && !gt.data[0] && !gt.data[1] && !gt.data[16] && !gt.data[17] {
                spiked.data[0] = true;
                let spiked_r = pd_fa(
                    std::slice::from_ref(&spiked),
                    std::slice::from_ref(&gt),
                    MatchRule::PixelOverlap,
                )
                .unwrap();
                assert!(spiked_r.pd <= base.pd + 1e-12);
                assert!(spiked_r.false_components >= base.false_components);
            }
            assert!(base.pd >= 0.0 && base.pd <= 1.0);
        }
    }

    #[test]
    fn centroid_mode_matches_nearby_prediction() {
        let gt = mask_from(&["........", "..##....", "..##....", "........"]);
        // prediction offset by one pixel, no overlap
        let pred = mask_from(&["........", "....#...", "........", "........"]);
        let strict = pd_fa(
            std::slice::from_ref(&pred),
            std::slice::from_ref(&gt),
            MatchRule::PixelOverlap,
        )
        .unwrap();
        assert_eq!(strict.pd, 0.0);
        assert_eq!(strict.false_components, 1);
        let loose = pd_fa(&[pred], &[gt], MatchRule::CentroidDistance(3.0)).unwrap();
        assert_eq!(loose.pd, 1.0);
        assert_eq!(loose.false_components, 0);
    }

    #[test]
    fn roc_auc_hand_cases() {
        let t = |v: Vec<f64>| Tensor::new(Shape::new(1, 1, 2, 2), v).unwrap();
        let m = |v: [bool; 4]| BinaryMask::new(2, 2, v.to_vec()).unwrap();

        // perfectly separated
        let conf = t(vec![0.9, 0.8, 0.1, 0.2]);
        let gt = m([true, true, false, false]);
        let (_, auc) = roc_auc(&[(&conf, &gt)]).unwrap();
        assert_eq!(auc, 1.0);

        // identical scores everywhere -> chance
        let conf = t(vec![0.5; 4]);
        let (points, auc) = roc_auc(&[(&conf, &gt)]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
        assert_eq!(points.last().copied(), Some((1.0, 1.0)));

        // rank-sum hand case
        let conf = t(vec![0.9, 0.8, 0.4, 0.3]);
        let gt = m([true, false, true, false]);
        let (_, auc) = roc_auc(&[(&conf, &gt)]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);

        // degenerate class balance
        let all_pos = m([true, true, true, true]);
        assert!(matches!(roc_auc(&[(&conf, &all_pos)]), Err(Error::Usage(_))));
    }

    /// Mann-Whitney statistic with average ranks for ties.
    fn rank_sum_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let n = scores.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let mut ranks = vec![0.0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j < n && scores[idx[j]] == scores[idx[i]] {
                j += 1;
            }
            let avg = (i + 1 + j) as f64 / 2.0;
            for k in i..j {
                ranks[idx[k]] = avg;
            }
            i = j;
        }
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let n_neg = n as f64 - n_pos;
        let r_pos: f64 = (0..n).filter(|&i| labels[i]).map(|i| ranks[i]).sum();
        (r_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
    }

    #[test]
    fn roc_auc_matches_rank_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let n = 16;
            // quantized scores to force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let conf = Tensor::new(Shape::new(1, 1, 4, 4), scores.clone()).unwrap();
            let gt = BinaryMask::new(4, 4, labels.clone()).unwrap();
            let (_, auc) = roc_auc(&[(&conf, &gt)]).unwrap();
            let expect = rank_sum_auc(&scores, &labels);
            assert!((auc - expect).abs() < 1e-9, "case {case}: {auc} vs {expect}");
        }
    }
}
