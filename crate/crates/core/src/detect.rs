//! YOLO-v2 style detection head: target assignment, loss, decoding, NMS and
//! VOC 11-point average precision.
//!
//! Head layout: for anchor `a`, channels `a*(5+C) .. (a+1)*(5+C)` hold
//! `[tx, ty, tw, th, t_obj, class logits...]` at every grid cell. Boxes are
//! in normalized image coordinates; anchors are `(w, h)` in the same units.
//! A predicted box is `cx = (σ(tx) + col)/S`, `cy = (σ(ty) + row)/S`,
//! `w = anchor_w·exp(tw)`, `h = anchor_h·exp(th)`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Objectness weight on anchors without an assigned object.
pub const NOOBJ_WEIGHT: f64 = 0.1;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const EVAL_CONF_THRESH: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub class_id: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Anything with a center-size box.
pub trait BoxGeometry {
    fn center_size(&self) -> (f64, f64, f64, f64);

    fn corners(&self) -> (f64, f64, f64, f64) {
        let (cx, cy, w, h) = self.center_size();
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }
}

impl BoxGeometry for DetectionBox {
    fn center_size(&self) -> (f64, f64, f64, f64) {
        (self.cx, self.cy, self.w, self.h)
    }
}

impl BoxGeometry for GroundTruth {
    fn center_size(&self) -> (f64, f64, f64, f64) {
        (self.cx, self.cy, self.w, self.h)
    }
}

impl GroundTruth {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let ok = self.w > 0.0
            && self.h > 0.0
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.class_id < classes;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid ground truth {self:?} for {classes} classes")))
        }
    }
}

/// Intersection over union; 0 when the union is degenerate.
pub fn iou(a: &impl BoxGeometry, b: &impl BoxGeometry) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two boxes sharing a center, from their sizes only.
pub fn shape_iou(w0: f64, h0: f64, w1: f64, h1: f64) -> f64 {
    let inter = w0.min(w1) * h0.min(h1);
    let union = w0 * h0 + w1 * h1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Geometry of the detection head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub grid: usize,
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
}

impl HeadLayout {
    pub fn new(grid: usize, anchors: Vec<(f64, f64)>, classes: usize) -> Result<Self> {
        if grid == 0 || anchors.is_empty() || classes == 0 {
            return Err(Error::invalid("head needs a grid, at least one anchor and one class"));
        }
        if anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::invalid("anchor sizes must be positive"));
        }
        Ok(Self { grid, anchors, classes })
    }

    pub fn per_anchor(&self) -> usize {
        5 + self.classes
    }

    pub fn channels(&self) -> usize {
        self.anchors.len() * self.per_anchor()
    }

    pub fn slots(&self) -> usize {
        self.grid * self.grid * self.anchors.len()
    }

    /// Slot index of `(row, col, anchor)`.
    pub fn slot(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.grid + col) * self.anchors.len() + anchor
    }

    /// Flat index into one sample's head output.
    fn at(&self, anchor: usize, field: usize, row: usize, col: usize) -> usize {
        ((anchor * self.per_anchor() + field) * self.grid + row) * self.grid + col
    }

    /// Grid cell `(row, col)` containing a normalized center.
    pub fn cell_of(&self, cx: f64, cy: f64) -> (usize, usize) {
        let s = self.grid as f64;
        let col = ((cx * s).floor() as isize).clamp(0, self.grid as isize - 1) as usize;
        let row = ((cy * s).floor() as isize).clamp(0, self.grid as isize - 1) as usize;
        (row, col)
    }

    /// Anchor whose shape best overlaps `(w, h)`; the lowest index wins ties.
    pub fn best_anchor(&self, w: f64, h: f64) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (a, &(aw, ah)) in self.anchors.iter().enumerate() {
            let v = shape_iou(w, h, aw, ah);
            if v > best.1 {
                best = (a, v);
            }
        }
        best.0
    }

    fn check_head<T: Scalar>(&self, head: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = head.nchw()?;
        if c != self.channels() || h != self.grid || w != self.grid {
            return Err(Error::shape(format!(
                "head output {:?} does not match {} channels on a {}x{} grid",
                head.shape(),
                self.channels(),
                self.grid,
                self.grid
            )));
        }
        Ok(n)
    }
}

/// Maps every (cell, anchor) slot to the ground truth it is responsible for.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub slots: Vec<Option<usize>>,
}

impl Assignment {
    pub fn assigned(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slots.iter().enumerate().filter_map(|(s, g)| g.map(|g| (s, g)))
    }
}

/// Assigns each ground truth to the cell holding its center and the anchor
/// of highest shape IoU. A slot keeps the first ground truth that claims it.
pub fn assign_targets(gts: &[GroundTruth], layout: &HeadLayout) -> Assignment {
    let mut slots = vec![None; layout.slots()];
    for (g, gt) in gts.iter().enumerate() {
        let (row, col) = layout.cell_of(gt.cx, gt.cy);
        let a = layout.best_anchor(gt.w, gt.h);
        let s = layout.slot(row, col, a);
        if slots[s].is_none() {
            slots[s] = Some(g);
        }
    }
    Assignment { slots }
}

/// Detection loss terms and the gradient of `w_cls·l_cls + w_loc·l_loc`.
#[derive(Debug, Clone)]
pub struct DetectionLoss<T: Scalar> {
    pub l_cls: f64,
    pub l_loc: f64,
    pub grad: Tensor<T>,
}

/// Squared-error YOLO loss averaged over the batch.
///
/// `l_loc` sums `(σ(tx) − x*)² + (σ(ty) − y*)² + (tw − w*)² + (th − h*)²` over
/// assigned anchors, with `w* = ln(w/anchor_w)`. `l_cls` sums the objectness
/// error (target: IoU of the predicted box with its ground truth on assigned
/// anchors; 0 with weight [`NOOBJ_WEIGHT`] elsewhere) and the squared error of
/// the class softmax against the one-hot label on assigned anchors. The IoU
/// target is treated as a constant.
pub fn detection_loss_and_grad<T: Scalar>(
    head: &Tensor<T>,
    batch_gts: &[Vec<GroundTruth>],
    layout: &HeadLayout,
    w_cls: f64,
    w_loc: f64,
) -> Result<DetectionLoss<T>> {
    let n = layout.check_head(head)?;
    if batch_gts.len() != n {
        return Err(Error::shape(format!("{} label sets for a batch of {n}", batch_gts.len())));
    }
    head.ensure_finite("head output")?;
    let per = layout.channels() * layout.grid * layout.grid;
    let s = layout.grid as f64;
    let inv_n = 1.0 / n as f64;
    let (mut l_cls, mut l_loc) = (0.0, 0.0);
    let mut grad = vec![T::zero(); head.len()];
    for (b, gts) in batch_gts.iter().enumerate() {
        let x = &head.data()[b * per..(b + 1) * per];
        let gx = &mut grad[b * per..(b + 1) * per];
        let v = |i: usize| x[i].as_f64();
        let assignment = assign_targets(gts, layout);
        for row in 0..layout.grid {
            for col in 0..layout.grid {
                for (a, &(aw, ah)) in layout.anchors.iter().enumerate() {
                    let idx = |f: usize| layout.at(a, f, row, col);
                    let obj = sigmoid(v(idx(4)));
                    let dobj = obj * (1.0 - obj);
                    let Some(g) = assignment.slots[layout.slot(row, col, a)] else {
                        l_cls += NOOBJ_WEIGHT * obj * obj * inv_n;
                        gx[idx(4)] = T::from_f64(w_cls * NOOBJ_WEIGHT * 2.0 * obj * dobj * inv_n);
                        continue;
                    };
                    let gt = &gts[g];
                    let (sx, sy) = (sigmoid(v(idx(0))), sigmoid(v(idx(1))));
                    let (tw, th) = (v(idx(2)), v(idx(3)));
                    let (ox, oy) = (gt.cx * s - col as f64, gt.cy * s - row as f64);
                    let (tw_t, th_t) = ((gt.w / aw).ln(), (gt.h / ah).ln());
                    l_loc +=
                        ((sx - ox).powi(2) + (sy - oy).powi(2) + (tw - tw_t).powi(2) + (th - th_t).powi(2)) * inv_n;
                    gx[idx(0)] = T::from_f64(w_loc * 2.0 * (sx - ox) * sx * (1.0 - sx) * inv_n);
                    gx[idx(1)] = T::from_f64(w_loc * 2.0 * (sy - oy) * sy * (1.0 - sy) * inv_n);
                    gx[idx(2)] = T::from_f64(w_loc * 2.0 * (tw - tw_t) * inv_n);
                    gx[idx(3)] = T::from_f64(w_loc * 2.0 * (th - th_t) * inv_n);

                    let pred = DetectionBox {
                        class_id: gt.class_id,
                        score: obj,
                        cx: (sx + col as f64) / s,
                        cy: (sy + row as f64) / s,
                        w: aw * tw.exp(),
                        h: ah * th.exp(),
                    };
                    let target = iou(&pred, gt);
                    l_cls += (obj - target).powi(2) * inv_n;
                    gx[idx(4)] = T::from_f64(w_cls * 2.0 * (obj - target) * dobj * inv_n);

                    let logits: Vec<f64> = (0..layout.classes).map(|k| v(idx(5 + k))).collect();
                    let p = softmax(&logits);
                    let resid: Vec<f64> =
                        (0..layout.classes).map(|k| p[k] - if k == gt.class_id { 1.0 } else { 0.0 }).collect();
                    l_cls += resid.iter().map(|r| r * r).sum::<f64>() * inv_n;
                    let dot: f64 = resid.iter().zip(&p).map(|(r, q)| r * q).sum();
                    for k in 0..layout.classes {
                        gx[idx(5 + k)] = T::from_f64(w_cls * 2.0 * p[k] * (resid[k] - dot) * inv_n);
                    }
                }
            }
        }
    }
    Ok(DetectionLoss { l_cls, l_loc, grad: Tensor::new(head.shape(), grad)? })
}

/// `(l_cls, l_loc)` for a single image.
pub fn detection_loss<T: Scalar>(head: &Tensor<T>, gts: &[GroundTruth], layout: &HeadLayout) -> Result<(f64, f64)> {
    let n = layout.check_head(head)?;
    if n != 1 {
        return Err(Error::shape("detection_loss expects a single image; use detection_loss_and_grad for batches"));
    }
    let r = detection_loss_and_grad(head, &[gts.to_vec()], layout, 1.0, 1.0)?;
    Ok((r.l_cls, r.l_loc))
}

fn clip_to_unit(b: DetectionBox) -> Option<DetectionBox> {
    let (x0, y0, x1, y1) = b.corners();
    let (x0, y0, x1, y1) = (x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
    let (w, h) = (x1 - x0, y1 - y0);
    (w > 0.0 && h > 0.0).then_some(DetectionBox { cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w, h, ..b })
}

/// Decodes one image's head output into per-class scored boxes,
/// `score = σ(t_obj) · softmax(logits)_k`, keeping scores `≥ conf_thresh`.
/// Boxes are clipped to the unit square.
pub fn decode<T: Scalar>(head: &Tensor<T>, layout: &HeadLayout, conf_thresh: f64) -> Result<Vec<DetectionBox>> {
    let n = layout.check_head(head)?;
    if n != 1 {
        return Err(Error::shape("decode expects a single image"));
    }
    if !(0.0..=1.0).contains(&conf_thresh) {
        return Err(Error::invalid(format!("confidence threshold {conf_thresh} outside [0,1]")));
    }
    let x = head.data();
    let s = layout.grid as f64;
    let mut out = Vec::new();
    for row in 0..layout.grid {
        for col in 0..layout.grid {
            for (a, &(aw, ah)) in layout.anchors.iter().enumerate() {
                let v = |f: usize| x[layout.at(a, f, row, col)].as_f64();
                let obj = sigmoid(v(4));
                let logits: Vec<f64> = (0..layout.classes).map(|k| v(5 + k)).collect();
                let p = softmax(&logits);
                for (k, pk) in p.into_iter().enumerate() {
                    let score = obj * pk;
                    if score < conf_thresh || score <= 0.0 {
                        continue;
                    }
                    let b = DetectionBox {
                        class_id: k,
                        score,
                        cx: (sigmoid(v(0)) + col as f64) / s,
                        cy: (sigmoid(v(1)) + row as f64) / s,
                        w: aw * v(2).exp(),
                        h: ah * v(3).exp(),
                    };
                    out.extend(clip_to_unit(b));
                }
            }
        }
    }
    Ok(out)
}

/// Ideal head output for a set of ground truths: assigned anchors decode
/// exactly to their box with saturated objectness and class logits;
/// every other anchor has objectness logit `-saturation`.
pub fn encode_targets(gts: &[GroundTruth], layout: &HeadLayout, saturation: f64) -> Result<Tensor<f64>> {
    let s = layout.grid as f64;
    let mut head = vec![0.0; layout.channels() * layout.grid * layout.grid];
    for row in 0..layout.grid {
        for col in 0..layout.grid {
            for a in 0..layout.anchors.len() {
                head[layout.at(a, 4, row, col)] = -saturation;
            }
        }
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    for (slot, g) in assign_targets(gts, layout).assigned() {
        let gt = &gts[g];
        let a = slot % layout.anchors.len();
        let (row, col) = layout.cell_of(gt.cx, gt.cy);
        let (aw, ah) = layout.anchors[a];
        head[layout.at(a, 0, row, col)] = logit(gt.cx * s - col as f64);
        head[layout.at(a, 1, row, col)] = logit(gt.cy * s - row as f64);
        head[layout.at(a, 2, row, col)] = (gt.w / aw).ln();
        head[layout.at(a, 3, row, col)] = (gt.h / ah).ln();
        head[layout.at(a, 4, row, col)] = saturation;
        for k in 0..layout.classes {
            head[layout.at(a, 5 + k, row, col)] = if k == gt.class_id { saturation } else { -saturation };
        }
    }
    Tensor::new(&[layout.channels(), layout.grid, layout.grid], head)
}

/// Greedy per-class suppression. Output is ordered by descending score,
/// ties in input order.
pub fn nms(boxes: &[DetectionBox], iou_thresh: f64) -> Result<Vec<DetectionBox>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::invalid(format!("NMS threshold {iou_thresh} outside (0,1]")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for i in order {
        let cand = &boxes[i];
        let suppressed = kept.iter().any(|k| k.class_id == cand.class_id && iou(k, cand) > iou_thresh);
        if !suppressed {
            kept.push(*cand);
        }
    }
    Ok(kept)
}

/// Detections and labels of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub dets: Vec<DetectionBox>,
    pub gts: Vec<GroundTruth>,
}

/// VOC2007 11-point interpolated AP for one class over a set of images.
///
/// Detections are matched in descending score order to the unmatched ground
/// truth of highest IoU in the same image; a detection whose best IoU is
/// below `iou_thresh` or whose best ground truth is already taken counts as
/// a false positive. With no ground truth the AP is 1 if there are also no
/// detections, else 0.
pub fn average_precision(images: &[ImageEval], class_id: usize, iou_thresh: f64) -> f64 {
    let mut dets: Vec<(usize, &DetectionBox)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.dets.iter().filter(|d| d.class_id == class_id).map(move |d| (i, d)))
        .collect();
    let n_gt: usize = images.iter().map(|im| im.gts.iter().filter(|g| g.class_id == class_id).count()).sum();
    if n_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for (k, (img, det)) in dets.iter().enumerate() {
        let mut best = (None, f64::NEG_INFINITY);
        for (g, gt) in images[*img].gts.iter().enumerate() {
            if gt.class_id != class_id {
                continue;
            }
            let o = iou(*det, gt);
            if o > best.1 {
                best = (Some(g), o);
            }
        }
        if let (Some(g), o) = best {
            if o >= iou_thresh && !taken[*img][g] {
                taken[*img][g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    eleven_point(&curve)
}

/// Mean over t ∈ {0, 0.1, …, 1} of the best precision at recall ≥ t.
pub fn eleven_point(curve: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|i| {
            let t = i as f64 / 10.0;
            curve.iter().filter(|(r, _)| *r >= t).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// AP per class; `None` for classes without any ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Unweighted mean of per-class AP over classes with at least one ground truth.
pub fn mean_ap(images: &[ImageEval], classes: usize, iou_thresh: f64) -> MapReport {
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let populated = images.iter().any(|im| im.gts.iter().any(|g| g.class_id == c));
            populated.then(|| average_precision(images, c, iou_thresh))
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    MapReport { map, per_class }
}

pub const DUMP_HEADER: &str = "image_id,class_id,score,cx,cy,w,h";

/// Serializes detections as `image_id,class_id,score,cx,cy,w,h` lines.
pub fn write_detection_dump(images: &[ImageEval]) -> String {
    let mut s = String::from(DUMP_HEADER);
    s.push('\n');
    for (i, im) in images.iter().enumerate() {
        for d in &im.dets {
            let _ = writeln!(s, "{i},{},{},{},{},{},{}", d.class_id, d.score, d.cx, d.cy, d.w, d.h);
        }
    }
    s
}

/// Parses a detection dump into per-image detection lists (`images` entries).
pub fn parse_detection_dump(text: &str, images: usize, origin: &Path) -> Result<Vec<Vec<DetectionBox>>> {
    let mut out = vec![Vec::new(); images];
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == DUMP_HEADER {
            continue;
        }
        let bad = |what: &str| Error::format(origin, format!("line {}: {what}", ln + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let img: usize = f[0].parse().map_err(|_| bad("bad image id"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let d = DetectionBox {
            class_id: f[1].parse().map_err(|_| bad("bad class id"))?,
            score: num(f[2])?,
            cx: num(f[3])?,
            cy: num(f[4])?,
            w: num(f[5])?,
            h: num(f[6])?,
        };
        out.get_mut(img).ok_or_else(|| bad("image id out of range"))?.push(d);
    }
    Ok(out)
}
