//! Sequence evaluation: MOTA/MOTP with identity switches, IDF1 under a
//! global identity mapping, and mostly-tracked / mostly-lost rates.

use std::collections::BTreeMap;

use crate::assoc::{hungarian, CostMatrix};
use crate::bbox::BBox;

pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const MT_COVERAGE: f64 = 0.8;
pub const ML_COVERAGE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("ground truth is empty; the metrics are undefined")]
    EmptyGroundTruth,
    #[error("identity {id} appears twice in frame {frame}")]
    DuplicateIdentity { frame: usize, id: u64 },
}

/// Per-frame identity-labelled boxes. Used for both ground truth and
/// tracker output.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    frames: BTreeMap<usize, Vec<(u64, BBox)>>,
}

/// Tracker output shares the representation.
pub type Predictions = GroundTruth;

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: usize, id: u64, bbox: BBox) -> Result<(), MetricsError> {
        let entry = self.frames.entry(frame).or_default();
        if entry.iter().any(|&(existing, _)| existing == id) {
            return Err(MetricsError::DuplicateIdentity { frame, id });
        }
        entry.push((id, bbox));
        Ok(())
    }

    pub fn frames(&self) -> &BTreeMap<usize, Vec<(u64, BBox)>> {
        &self.frames
    }

    pub fn total_boxes(&self) -> usize {
        self.frames.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_boxes() == 0
    }

    pub fn from_tracks(tracks: &[crate::assoc::Track]) -> Result<Self, MetricsError> {
        let mut out = Self::new();
        for track in tracks {
            for b in &track.boxes {
                out.insert(b.frame, track.id, b.bbox)?;
            }
        }
        Ok(out)
    }
}

/// Matching options for the CLEAR protocol.
#[derive(Clone, Copy, Debug)]
pub struct MatchOptions {
    pub iou_thresh: f64,
    /// Keep the previous frame's correspondence when it still clears the
    /// threshold, before matching the rest.
    pub continuity: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            iou_thresh: DEFAULT_IOU_THRESH,
            continuity: true,
        }
    }
}

/// Aggregate report for one sequence.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub mota: f64,
    pub motp: f64,
    pub idf1: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub true_positives: usize,
    /// Fractions of ground-truth identities tracked at least 80% / at
    /// most 20% of their lifespan.
    pub mostly_tracked: f64,
    pub mostly_lost: f64,
    pub gt_count: usize,
    pub pred_count: usize,
}

impl MetricsReport {
    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<8}{:>10}\n", "metric", "value"));
        let rows: Vec<(&str, String)> = vec![
            ("MOTA", format!("{:.3}", self.mota)),
            ("MOTP", format!("{:.3}", self.motp)),
            ("IDF1", format!("{:.3}", self.idf1)),
            ("MT", format!("{:.3}", self.mostly_tracked)),
            ("ML", format!("{:.3}", self.mostly_lost)),
            ("FP", format!("{}", self.false_positives)),
            ("FN", format!("{}", self.false_negatives)),
            ("IDS", format!("{}", self.id_switches)),
            ("GT", format!("{}", self.gt_count)),
        ];
        for (name, value) in rows {
            s.push_str(&format!("{:<8}{:>10}\n", name, value));
        }
        s
    }

    /// Machine-readable CSV: header line plus one value line.
    pub fn csv(&self) -> String {
        format!(
            "mota,motp,idf1,mt,ml,fp,fn,ids,gt_count,pred_count\n{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
            self.mota,
            self.motp,
            self.idf1,
            self.mostly_tracked,
            self.mostly_lost,
            self.false_positives,
            self.false_negatives,
            self.id_switches,
            self.gt_count,
            self.pred_count
        )
    }
}

/// Correspondence between one frame's ground-truth and predicted boxes:
/// Hungarian on `1 - IoU` with pairs under the threshold forbidden.
/// Pairs carried in from the previous frame are kept first when still
/// above threshold. Returns `(gt_index, pred_index)` pairs.
pub fn match_frame(
    gt: &[(u64, BBox)],
    preds: &[(u64, BBox)],
    iou_thresh: f64,
    carry: &BTreeMap<u64, u64>,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; preds.len()];

    for (gi, &(gid, gbox)) in gt.iter().enumerate() {
        let Some(&pid) = carry.get(&gid) else { continue };
        let Some(pi) = preds
            .iter()
            .position(|&(p, _)| p == pid)
        else {
            continue;
        };
        if !pred_used[pi] && gbox.iou(&preds[pi].1) >= iou_thresh {
            pairs.push((gi, pi));
            gt_used[gi] = true;
            pred_used[pi] = true;
        }
    }

    let open_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    let open_pred: Vec<usize> = (0..preds.len()).filter(|&i| !pred_used[i]).collect();
    if !open_gt.is_empty() && !open_pred.is_empty() {
        let mut costs = CostMatrix::new(open_gt.len(), open_pred.len());
        for (row, &gi) in open_gt.iter().enumerate() {
            for (col, &pi) in open_pred.iter().enumerate() {
                let iou = gt[gi].1.iou(&preds[pi].1);
                if iou < iou_thresh {
                    costs.forbid(row, col);
                } else {
                    costs.set(row, col, 1.0 - iou);
                }
            }
        }
        for &(row, col) in &hungarian(&costs).pairs {
            pairs.push((open_gt[row], open_pred[col]));
        }
    }
    pairs.sort_unstable();
    pairs
}

struct Accumulation {
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
    id_switches: usize,
    iou_sum: f64,
    per_id_frames: BTreeMap<u64, usize>,
    per_id_matched: BTreeMap<u64, usize>,
}

fn accumulate(gt: &GroundTruth, preds: &Predictions, opts: &MatchOptions) -> Accumulation {
    let mut acc = Accumulation {
        true_positives: 0,
        false_positives: 0,
        false_negatives: 0,
        id_switches: 0,
        iou_sum: 0.0,
        per_id_frames: BTreeMap::new(),
        per_id_matched: BTreeMap::new(),
    };
    let empty: Vec<(u64, BBox)> = Vec::new();
    let all_frames: std::collections::BTreeSet<usize> = gt
        .frames
        .keys()
        .chain(preds.frames.keys())
        .copied()
        .collect();
    let mut carry: BTreeMap<u64, u64> = BTreeMap::new();
    // last prediction id ever matched to each ground-truth identity;
    // a re-match under a different id counts as a switch even across gaps
    let mut last_matched_id: BTreeMap<u64, u64> = BTreeMap::new();

    for frame in all_frames {
        let gt_list = gt.frames.get(&frame).unwrap_or(&empty);
        let pred_list = preds.frames.get(&frame).unwrap_or(&empty);
        for &(gid, _) in gt_list {
            *acc.per_id_frames.entry(gid).or_insert(0) += 1;
        }
        let carry_in = if opts.continuity { carry.clone() } else { BTreeMap::new() };
        let pairs = match_frame(gt_list, pred_list, opts.iou_thresh, &carry_in);

        acc.true_positives += pairs.len();
        acc.false_positives += pred_list.len() - pairs.len();
        acc.false_negatives += gt_list.len() - pairs.len();

        carry.clear();
        for &(gi, pi) in &pairs {
            let (gid, gbox) = gt_list[gi];
            let (pid, pbox) = pred_list[pi];
            acc.iou_sum += gbox.iou(&pbox);
            *acc.per_id_matched.entry(gid).or_insert(0) += 1;
            if let Some(&prev) = last_matched_id.get(&gid) {
                if prev != pid {
                    acc.id_switches += 1;
                }
            }
            last_matched_id.insert(gid, pid);
            carry.insert(gid, pid);
        }
    }
    acc
}

/// CLEAR scores: accuracy from the FP/FN/switch counts and precision as
/// the mean overlap of matched pairs.
pub fn clear_mot(
    gt: &GroundTruth,
    preds: &Predictions,
    opts: &MatchOptions,
) -> Result<MetricsReport, MetricsError> {
    let gt_count = gt.total_boxes();
    if gt_count == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let acc = accumulate(gt, preds, opts);
    let errors = acc.false_positives + acc.false_negatives + acc.id_switches;
    let mota = 1.0 - errors as f64 / gt_count as f64;
    let motp = if acc.true_positives > 0 {
        acc.iou_sum / acc.true_positives as f64
    } else {
        0.0
    };
    let ids = acc.per_id_frames.len().max(1) as f64;
    let mostly_tracked = acc
        .per_id_frames
        .iter()
        .filter(|(id, &total)| {
            let matched = acc.per_id_matched.get(id).copied().unwrap_or(0);
            matched as f64 / total as f64 >= MT_COVERAGE
        })
        .count() as f64
        / ids;
    let mostly_lost = acc
        .per_id_frames
        .iter()
        .filter(|(id, &total)| {
            let matched = acc.per_id_matched.get(id).copied().unwrap_or(0);
            matched as f64 / total as f64 <= ML_COVERAGE
        })
        .count() as f64
        / ids;
    Ok(MetricsReport {
        mota,
        motp,
        idf1: idf1(gt, preds, opts),
        false_positives: acc.false_positives,
        false_negatives: acc.false_negatives,
        id_switches: acc.id_switches,
        true_positives: acc.true_positives,
        mostly_tracked,
        mostly_lost,
        gt_count,
        pred_count: preds.total_boxes(),
    })
}

/// Full evaluation; currently identical to [`clear_mot`], which already
/// folds in IDF1 and MT/ML.
pub fn evaluate(
    gt: &GroundTruth,
    preds: &Predictions,
    opts: &MatchOptions,
) -> Result<MetricsReport, MetricsError> {
    clear_mot(gt, preds, opts)
}

/// Identity F1: a global bipartite mapping between ground-truth and
/// predicted identities maximizes the number of frames where the mapped
/// pair overlaps at least `iou_thresh`, giving
/// `2 IDTP / (2 IDTP + IDFP + IDFN)`.
pub fn idf1(gt: &GroundTruth, preds: &Predictions, opts: &MatchOptions) -> f64 {
    let empty: Vec<(u64, BBox)> = Vec::new();
    let mut overlap: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let all_frames: std::collections::BTreeSet<usize> = gt
        .frames
        .keys()
        .chain(preds.frames.keys())
        .copied()
        .collect();
    for frame in all_frames {
        let gt_list = gt.frames.get(&frame).unwrap_or(&empty);
        let pred_list = preds.frames.get(&frame).unwrap_or(&empty);
        for &(gid, gbox) in gt_list {
            for &(pid, pbox) in pred_list {
                if gbox.iou(&pbox) >= opts.iou_thresh {
                    *overlap.entry((gid, pid)).or_insert(0) += 1;
                }
            }
        }
    }
    let gt_ids: Vec<u64> = {
        let mut v: Vec<u64> = gt
            .frames
            .values()
            .flatten()
            .map(|&(id, _)| id)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let pred_ids: Vec<u64> = {
        let mut v: Vec<u64> = preds
            .frames
            .values()
            .flatten()
            .map(|&(id, _)| id)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut idtp = 0usize;
    if !gt_ids.is_empty() && !pred_ids.is_empty() {
        let mut costs = CostMatrix::new(gt_ids.len(), pred_ids.len());
        for (row, &gid) in gt_ids.iter().enumerate() {
            for (col, &pid) in pred_ids.iter().enumerate() {
                let o = overlap.get(&(gid, pid)).copied().unwrap_or(0);
                costs.set(row, col, -(o as f64));
            }
        }
        for &(row, col) in &hungarian(&costs).pairs {
            idtp += overlap
                .get(&(gt_ids[row], pred_ids[col]))
                .copied()
                .unwrap_or(0);
        }
    }
    let idfp = preds.total_boxes() - idtp;
    let idfn = gt.total_boxes() - idtp;
    let denom = 2 * idtp + idfp + idfn;
    if denom == 0 {
        1.0
    } else {
        2.0 * idtp as f64 / denom as f64
    }
}

/// Mostly-tracked and mostly-lost fractions (coverage at least 80% /
/// at most 20%, both inclusive).
pub fn mt_ml(gt: &GroundTruth, preds: &Predictions, opts: &MatchOptions) -> (f64, f64) {
    let acc = accumulate(gt, preds, opts);
    let ids = acc.per_id_frames.len().max(1) as f64;
    let mt = acc
        .per_id_frames
        .iter()
        .filter(|(id, &total)| {
            acc.per_id_matched.get(id).copied().unwrap_or(0) as f64 / total as f64 >= MT_COVERAGE
        })
        .count() as f64
        / ids;
    let ml = acc
        .per_id_frames
        .iter()
        .filter(|(id, &total)| {
            acc.per_id_matched.get(id).copied().unwrap_or(0) as f64 / total as f64 <= ML_COVERAGE
        })
        .count() as f64
        / ids;
    (mt, ml)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 20.0, 40.0)
    }

    fn static_sequence(ids: u64, frames: usize) -> GroundTruth {
        let mut gt = GroundTruth::new();
        for f in 1..=frames {
            for id in 1..=ids {
                gt.insert(f, id, boxed(id as f64 * 50.0)).unwrap();
            }
        }
        gt
    }

    #[test]
    fn identical_sets_are_perfect() {
        let gt = static_sequence(3, 5);
        let report = evaluate(&gt, &gt.clone(), &MatchOptions::default()).unwrap();
        assert_eq!(report.mota, 1.0);
        assert_eq!(report.idf1, 1.0);
        assert_eq!(report.motp, 1.0);
        assert_eq!(report.id_switches, 0);
        assert_eq!(report.false_positives, 0);
        assert_eq!(report.false_negatives, 0);
        assert_eq!(report.mostly_tracked, 1.0);
        assert_eq!(report.mostly_lost, 0.0);
    }

    #[test]
    fn disjoint_boxes_are_all_errors() {
        let gt = static_sequence(2, 3);
        let mut preds = Predictions::new();
        for f in 1..=3 {
            preds.insert(f, 1, boxed(1000.0)).unwrap();
        }
        let report = evaluate(&gt, &preds, &MatchOptions::default()).unwrap();
        assert_eq!(report.false_positives, 3);
        assert_eq!(report.false_negatives, 6);
        assert_eq!(report.true_positives, 0);
    }

    #[test]
    fn one_third_iou_stays_unmatched() {
        // IoU of (0,0,10,10) vs (5,0,15,10) is 50/150
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        let pairs = match_frame(&[(1, a)], &[(1, b)], 0.5, &BTreeMap::new());
        assert!(pairs.is_empty());
    }

    #[test]
    fn empty_predictions_give_zero_mota() {
        let gt = static_sequence(2, 5);
        let report = evaluate(&gt, &Predictions::new(), &MatchOptions::default()).unwrap();
        assert_eq!(report.false_negatives, 10);
        assert_eq!(report.mota, 0.0);
        assert_eq!(report.idf1, 0.0);
        assert_eq!(report.mostly_lost, 1.0);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let preds = static_sequence(1, 2);
        assert!(matches!(
            evaluate(&GroundTruth::new(), &preds, &MatchOptions::default()),
            Err(MetricsError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn hand_constructed_error_counts() {
        // 10 identities x 10 frames = 100 boxes; remove 3 predictions,
        // add 2 spurious ones, switch one identity once
        let gt = static_sequence(10, 10);
        let mut preds = Predictions::new();
        for f in 1..=10usize {
            for id in 1..=10u64 {
                if id == 3 && (4..=6).contains(&f) {
                    continue; // 3 misses
                }
                let pid = if id == 7 && f >= 6 { 77 } else { id }; // 1 switch
                preds.insert(f, pid, boxed(id as f64 * 50.0)).unwrap();
            }
        }
        preds.insert(2, 99, boxed(5000.0)).unwrap(); // 2 false positives
        preds.insert(3, 99, boxed(5000.0)).unwrap();

        let report = evaluate(&gt, &preds, &MatchOptions::default()).unwrap();
        assert_eq!(report.false_positives, 2);
        assert_eq!(report.false_negatives, 3);
        assert_eq!(report.id_switches, 1);
        assert_eq!(report.gt_count, 100);
        assert_eq!(report.mota, 0.94);
    }

    #[test]
    fn bookkeeping_identities_hold() {
        let gt = static_sequence(4, 7);
        let mut preds = Predictions::new();
        for f in 1..=7usize {
            for id in 1..=3u64 {
                if f % 2 == 0 && id == 2 {
                    continue;
                }
                preds.insert(f, id, boxed(id as f64 * 50.0)).unwrap();
            }
            preds.insert(f, 50, boxed(2000.0)).unwrap();
        }
        let report = evaluate(&gt, &preds, &MatchOptions::default()).unwrap();
        assert_eq!(
            report.false_positives + report.true_positives,
            report.pred_count
        );
        assert_eq!(
            report.false_negatives + report.true_positives,
            report.gt_count
        );
    }

    #[test]
    fn identity_split_halves_idf1() {
        let mut gt = GroundTruth::new();
        let mut preds = Predictions::new();
        for f in 1..=10usize {
            gt.insert(f, 1, boxed(0.0)).unwrap();
            let pid = if f <= 5 { 10 } else { 20 };
            preds.insert(f, pid, boxed(0.0)).unwrap();
        }
        assert_eq!(idf1(&gt, &preds, &MatchOptions::default()), 0.5);
    }

    #[test]
    fn coverage_thresholds_are_inclusive() {
        let mut gt = GroundTruth::new();
        let mut preds = Predictions::new();
        for f in 1..=10usize {
            gt.insert(f, 1, boxed(0.0)).unwrap(); // covered 8/10
            gt.insert(f, 2, boxed(100.0)).unwrap(); // covered 5/10
            gt.insert(f, 3, boxed(200.0)).unwrap(); // covered 2/10
            if f <= 8 {
                preds.insert(f, 1, boxed(0.0)).unwrap();
            }
            if f <= 5 {
                preds.insert(f, 2, boxed(100.0)).unwrap();
            }
            if f <= 2 {
                preds.insert(f, 3, boxed(200.0)).unwrap();
            }
        }
        let (mt, ml) = mt_ml(&gt, &preds, &MatchOptions::default());
        assert!((mt - 1.0 / 3.0).abs() < 1e-12, "exactly 0.8 counts as MT");
        assert!((ml - 1.0 / 3.0).abs() < 1e-12, "exactly 0.2 counts as ML");
    }

    #[test]
    fn continuity_keeps_previous_correspondence() {
        let gbox = BBox::new(0.0, 0.0, 10.0, 10.0);
        let drift = BBox::new(1.0, 0.0, 11.0, 10.0); // IoU ~0.82 with gbox
        let mut gt = GroundTruth::new();
        let mut preds = Predictions::new();
        for f in 1..=3usize {
            gt.insert(f, 1, gbox).unwrap();
            preds.insert(f, 5, drift).unwrap();
            if f >= 2 {
                preds.insert(f, 6, gbox).unwrap(); // closer newcomer
            }
        }
        let with = evaluate(&gt, &preds, &MatchOptions::default()).unwrap();
        assert_eq!(with.id_switches, 0, "carried match must win");
        let without = evaluate(
            &gt,
            &preds,
            &MatchOptions {
                continuity: false,
                ..MatchOptions::default()
            },
        )
        .unwrap();
        assert_eq!(without.id_switches, 1, "greedy re-match switches");
    }

    #[test]
    fn deleting_a_matched_frame_never_raises_idf1() {
        let mut gt = GroundTruth::new();
        let mut preds = Predictions::new();
        for f in 1..=6usize {
            gt.insert(f, 1, boxed(0.0)).unwrap();
            preds.insert(f, 9, boxed(0.0)).unwrap();
        }
        let full = idf1(&gt, &preds, &MatchOptions::default());
        for removed in 1..=6usize {
            let mut cut = Predictions::new();
            for f in 1..=6usize {
                if f != removed {
                    cut.insert(f, 9, boxed(0.0)).unwrap();
                }
            }
            assert!(idf1(&gt, &cut, &MatchOptions::default()) <= full + 1e-12);
        }
    }
}
