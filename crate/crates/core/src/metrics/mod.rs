//! Panoptic, segmentation and recognition quality, plus the identity-aware
//! variants that additionally require matched segments to share an instance id.
//!
//! Classes below `c_bg` are stuff: all their pixels form one segment per map.
//! Other classes are things, one segment per `(class, instance)` pair.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::PanopticMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// IoU ≥ threshold.
    #[default]
    AtLeast,
    /// IoU > threshold.
    Strict,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at_least" => Ok(Self::AtLeast),
            "strict" => Ok(Self::Strict),
            other => Err(Error::Config(format!("unknown pq threshold mode {other:?}"))),
        }
    }
}

impl ThresholdMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::AtLeast => "at_least",
            Self::Strict => "strict",
        }
    }

    fn passes(self, iou: f64, threshold: f64) -> bool {
        match self {
            Self::AtLeast => iou >= threshold,
            Self::Strict => iou > threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub threshold: f64,
    pub mode: ThresholdMode,
    pub id_aware: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            mode: ThresholdMode::AtLeast,
            id_aware: false,
        }
    }
}

/// `(class, instance)`; stuff segments use instance 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub class: usize,
    pub instance: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub pred: SegmentKey,
    pub target: SegmentKey,
    pub class: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<SegmentMatch>,
    pub false_positives: Vec<SegmentKey>,
    pub false_negatives: Vec<SegmentKey>,
}

fn segments(map: &PanopticMap, c_bg: usize) -> Vec<SegmentKey> {
    map.class_id
        .iter()
        .zip(&map.instance_id)
        .map(|(&class, &inst)| SegmentKey {
            class,
            instance: if class < c_bg { 0 } else { inst },
        })
        .collect()
}

/// One-to-one matching of same-class segments, greedy by descending IoU.
///
/// Equal IoUs resolve by ascending `(target, pred)` key so the result is
/// deterministic.
pub fn match_segments(pred: &PanopticMap, target: &PanopticMap, c_bg: usize, cfg: &MatchConfig) -> Result<MatchResult> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::shape(
            "match_segments",
            &[pred.height, pred.width],
            &[target.height, target.width],
        ));
    }
    let (ps, ts) = (segments(pred, c_bg), segments(target, c_bg));
    let mut p_area: BTreeMap<SegmentKey, usize> = BTreeMap::new();
    let mut t_area: BTreeMap<SegmentKey, usize> = BTreeMap::new();
    let mut inter: HashMap<(SegmentKey, SegmentKey), usize> = HashMap::new();
    for (&p, &t) in ps.iter().zip(&ts) {
        *p_area.entry(p).or_default() += 1;
        *t_area.entry(t).or_default() += 1;
        if p.class == t.class {
            *inter.entry((p, t)).or_default() += 1;
        }
    }
    let mut cands: Vec<SegmentMatch> = inter
        .into_iter()
        .filter(|(k, _)| !cfg.id_aware || k.0.instance == k.1.instance)
        .map(|((p, t), i)| {
            let union = p_area[&p] + t_area[&t] - i;
            SegmentMatch {
                pred: p,
                target: t,
                class: p.class,
                iou: i as f64 / union as f64,
            }
        })
        .filter(|m| cfg.mode.passes(m.iou, cfg.threshold))
        .collect();
    cands.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.target.cmp(&b.target)).then(a.pred.cmp(&b.pred)));
    let mut used_p = std::collections::HashSet::new();
    let mut used_t = std::collections::HashSet::new();
    let mut matches = Vec::new();
    for m in cands {
        if used_p.contains(&m.pred) || used_t.contains(&m.target) {
            continue;
        }
        used_p.insert(m.pred);
        used_t.insert(m.target);
        matches.push(m);
    }
    matches.sort_by_key(|m| (m.target, m.pred));
    Ok(MatchResult {
        matches,
        false_positives: p_area.keys().filter(|k| !used_p.contains(*k)).copied().collect(),
        false_negatives: t_area.keys().filter(|k| !used_t.contains(*k)).copied().collect(),
    })
}

/// Quality numbers for one class or one aggregate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassCounts {
    /// `SQ` = mean TP IoU, `RQ = TP / (TP + ½FP + ½FN)`, `PQ = SQ·RQ`.
    pub fn quality(&self) -> Quality {
        let sq = if self.tp > 0 { self.iou_sum / self.tp as f64 } else { 0.0 };
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        let rq = if denom > 0.0 { self.tp as f64 / denom } else { 0.0 };
        Quality { pq: sq * rq, sq, rq }
    }

    fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

/// Per-class counts from a match result.
pub fn class_counts(result: &MatchResult, num_classes: usize) -> Vec<ClassCounts> {
    let mut c = vec![ClassCounts::default(); num_classes];
    for m in &result.matches {
        c[m.class].tp += 1;
        c[m.class].iou_sum += m.iou;
    }
    for k in &result.false_positives {
        c[k.class].fp += 1;
    }
    for k in &result.false_negatives {
        c[k.class].fn_ += 1;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub stuff: bool,
    pub counts: ClassCounts,
    pub quality: Quality,
    pub id_counts: ClassCounts,
    pub id_quality: Quality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    /// Number of classes averaged over.
    pub classes: usize,
    pub quality: Quality,
    pub id_quality: Quality,
}

/// Per-class and averaged PQ/SQ/RQ with their id-aware counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    /// Only classes present in the target or the prediction.
    pub classes: Vec<ClassReport>,
    pub all: Aggregate,
    pub things: Aggregate,
    pub stuff: Aggregate,
}

fn average(name: &'static str, rows: &[&ClassReport]) -> Aggregate {
    let n = rows.len();
    let mean = |f: &dyn Fn(&ClassReport) -> f64| if n == 0 { 0.0 } else { rows.iter().map(|r| f(r)).sum::<f64>() / n as f64 };
    Aggregate {
        name: name.to_string(),
        classes: n,
        quality: Quality {
            pq: mean(&|r| r.quality.pq),
            sq: mean(&|r| r.quality.sq),
            rq: mean(&|r| r.quality.rq),
        },
        id_quality: Quality {
            pq: mean(&|r| r.id_quality.pq),
            sq: mean(&|r| r.id_quality.sq),
            rq: mean(&|r| r.id_quality.rq),
        },
    }
}

/// Builds the report from an id-agnostic and an id-aware match result.
pub fn pq_sq_rq(plain: &MatchResult, id_aware: &MatchResult, num_classes: usize, c_bg: usize) -> PqReport {
    let pc = class_counts(plain, num_classes);
    let ic = class_counts(id_aware, num_classes);
    let classes: Vec<ClassReport> = (0..num_classes)
        .filter(|&c| pc[c].present())
        .map(|c| ClassReport {
            class: c,
            stuff: c < c_bg,
            counts: pc[c],
            quality: pc[c].quality(),
            id_counts: ic[c],
            id_quality: ic[c].quality(),
        })
        .collect();
    let all: Vec<&ClassReport> = classes.iter().collect();
    let things: Vec<&ClassReport> = classes.iter().filter(|r| !r.stuff).collect();
    let stuff: Vec<&ClassReport> = classes.iter().filter(|r| r.stuff).collect();
    PqReport {
        all: average("All", &all),
        things: average("Things", &things),
        stuff: average("Stuff", &stuff),
        classes,
    }
}

/// Matches twice (plain and id-aware) and reports.
pub fn evaluate(
    pred: &PanopticMap,
    target: &PanopticMap,
    num_classes: usize,
    c_bg: usize,
    threshold: f64,
    mode: ThresholdMode,
) -> Result<PqReport> {
    if let Some(&c) = pred.class_id.iter().chain(&target.class_id).find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("class {c} outside 0..{num_classes}")));
    }
    let cfg = MatchConfig {
        threshold,
        mode,
        id_aware: false,
    };
    let plain = match_segments(pred, target, c_bg, &cfg)?;
    let id = match_segments(pred, target, c_bg, &MatchConfig { id_aware: true, ..cfg })?;
    Ok(pq_sq_rq(&plain, &id, num_classes, c_bg))
}

impl PqReport {
    pub const CSV_HEADER: [&'static str; 11] = ["row", "kind", "PQ", "SQ", "RQ", "PQID", "SQID", "RQID", "TP", "FP", "FN"];

    /// One row per present class, then `All`, `Things`, `Stuff`. Aggregate
    /// rows report the class count in the `TP` column and leave `FP`/`FN` empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        let q = |q: &Quality| [q.pq, q.sq, q.rq].map(|v| format!("{v:.6}"));
        for r in &self.classes {
            let mut rec = vec![r.class.to_string(), if r.stuff { "stuff" } else { "thing" }.to_string()];
            rec.extend(q(&r.quality));
            rec.extend(q(&r.id_quality));
            rec.extend([r.counts.tp, r.counts.fp, r.counts.fn_].map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        for a in [&self.all, &self.things, &self.stuff] {
            let mut rec = vec![a.name.clone(), "aggregate".to_string()];
            rec.extend(q(&a.quality));
            rec.extend(q(&a.id_quality));
            rec.extend([a.classes.to_string(), String::new(), String::new()]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
