//! Class-mean IoU, evaluation reports, comparison harnesses and visual output.

mod compare;
mod dump;
mod visuals;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::IGNORE;
use crate::error::{FrinetError, Result};

pub use compare::{
    compare_harness, plan_arms, run_arms, validate_arms, ArmPlan, ArmResult, CompareMode, ComparisonReport,
    ComparisonRow, HarnessBanks, HarnessData, SharedSetup,
};
pub use dump::{decode_dump, encode_dump, read_dump, write_dump, DumpTensor, DUMP_MAGIC};
pub use visuals::{
    decode_overlay, heatmap_color, heatmap_panels, image_png, overlay_mask, render_visuals, save_png, VISUAL_FILES,
};

/// How per-class IoU is formed from episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Pixel counts pooled over every episode of a class, then divided.
    #[default]
    Pooled,
    /// IoU per episode, averaged per class.
    PerEpisodeMean,
}

impl IouMode {
    pub fn name(self) -> &'static str {
        match self {
            IouMode::Pooled => "pooled",
            IouMode::PerEpisodeMean => "per_episode_mean",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassTally {
    pub intersection: u64,
    pub union: u64,
    pub episode_iou_sum: f64,
    pub episodes: u64,
}

/// Mergeable per-class intersection/union tallies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfusionAccumulator {
    pub tallies: BTreeMap<u8, ClassTally>,
}

/// Mean of `values`, correctly rounded for short lists (error-free summation plus one residual correction).
pub fn exact_mean(values: &[f64]) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &v in values {
        let s = hi + v;
        let bp = s - hi;
        lo += (hi - (s - bp)) + (v - bp);
        hi = s;
    }
    let n = values.len() as f64;
    let q = hi / n;
    let r = (-q).mul_add(n, hi) + lo;
    q + r / n
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one prediction (`0/1`) against a ground truth (`0/1/255`) for `class_id`.
    pub fn accumulate(&mut self, predicted: &Array2<u8>, gt: &Array2<u8>, class_id: u8) -> Result<()> {
        if predicted.dim() != gt.dim() {
            return Err(FrinetError::ShapeMismatch {
                context: "IoU accumulation",
                expected: gt.shape().to_vec(),
                found: predicted.shape().to_vec(),
            });
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in predicted.iter().zip(gt.iter()) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p == 1, g == 1);
            inter += u64::from(p && g);
            union += u64::from(p || g);
        }
        let t = self.tallies.entry(class_id).or_default();
        t.intersection += inter;
        t.union += union;
        if union > 0 {
            t.episode_iou_sum += inter as f64 / union as f64;
            t.episodes += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (c, o) in &other.tallies {
            let t = self.tallies.entry(*c).or_default();
            t.intersection += o.intersection;
            t.union += o.union;
            t.episode_iou_sum += o.episode_iou_sum;
            t.episodes += o.episodes;
        }
    }

    /// Per-class IoU; classes whose union is empty are dropped with a warning.
    pub fn finalize(&self, mode: IouMode) -> Result<BTreeMap<u8, f64>> {
        let mut out = BTreeMap::new();
        for (&c, t) in &self.tallies {
            if t.union == 0 {
                warn!("class {c} has an empty union over all episodes; excluded from mIoU");
                continue;
            }
            let iou = match mode {
                IouMode::Pooled => t.intersection as f64 / t.union as f64,
                IouMode::PerEpisodeMean => t.episode_iou_sum / t.episodes as f64,
            };
            out.insert(c, iou);
        }
        if out.is_empty() {
            return Err(FrinetError::EmptyAccumulator);
        }
        Ok(out)
    }
}

pub fn mean_iou(per_class: &BTreeMap<u8, f64>) -> f64 {
    exact_mean(&per_class.values().copied().collect::<Vec<_>>())
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_NO_EPISODES: &str = "no episodes";

/// Result of evaluating one checkpoint on one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<u8, f64>,
    pub miou: f64,
    pub fold: usize,
    pub shots: usize,
    pub num_episodes: usize,
    pub config_digest: String,
    pub episode_digest: String,
    pub iou_mode: IouMode,
    pub status: String,
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

impl EvalReport {
    pub fn empty(fold: usize, shots: usize, config_digest: String, iou_mode: IouMode) -> Self {
        EvalReport {
            per_class_iou: BTreeMap::new(),
            miou: 0.0,
            fold,
            shots,
            num_episodes: 0,
            config_digest,
            episode_digest: String::new(),
            iou_mode,
            status: STATUS_NO_EPISODES.into(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_accumulator(
        acc: &ConfusionAccumulator,
        iou_mode: IouMode,
        fold: usize,
        shots: usize,
        num_episodes: usize,
        config_digest: String,
        episode_digest: String,
    ) -> Result<Self> {
        let per_class_iou = acc.finalize(iou_mode)?;
        Ok(EvalReport {
            miou: mean_iou(&per_class_iou),
            per_class_iou,
            fold,
            shots,
            num_episodes,
            config_digest,
            episode_digest,
            iou_mode,
            status: STATUS_OK.into(),
        })
    }

    /// mIoU in percentage points.
    pub fn miou_percent(&self) -> f64 {
        100.0 * self.miou
    }

    /// Canonical JSON: sorted keys, floats with six decimals.
    pub fn to_json(&self) -> String {
        let mut classes = String::new();
        for (i, (c, v)) in self
            .per_class_iou
            .iter()
            .map(|(c, v)| (c.to_string(), v))
            .collect::<BTreeMap<_, _>>()
            .iter()
            .enumerate()
        {
            if i > 0 {
                classes.push_str(", ");
            }
            let _ = write!(classes, "\"{c}\": {}", fixed(**v));
        }
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"config_digest\": \"{}\",", self.config_digest);
        let _ = writeln!(s, "  \"episode_digest\": \"{}\",", self.episode_digest);
        let _ = writeln!(s, "  \"fold\": {},", self.fold);
        let _ = writeln!(s, "  \"iou_mode\": \"{}\",", self.iou_mode.name());
        let _ = writeln!(s, "  \"miou\": {},", fixed(self.miou));
        let _ = writeln!(s, "  \"num_episodes\": {},", self.num_episodes);
        let _ = writeln!(s, "  \"per_class_iou\": {{{classes}}},");
        let _ = writeln!(s, "  \"shots\": {},", self.shots);
        let _ = writeln!(s, "  \"status\": \"{}\"", self.status);
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let bad = |what: &str| FrinetError::Config(format!("report JSON: bad or missing `{what}`"));
        let num = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| bad(k));
        let uint = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| bad(k))
        };
        let text = |k: &str| {
            v.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| bad(k))
        };
        let mut per_class_iou = BTreeMap::new();
        for (k, val) in v
            .get("per_class_iou")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("per_class_iou"))?
        {
            let c: u8 = k.parse().map_err(|_| bad("per_class_iou key"))?;
            per_class_iou.insert(c, val.as_f64().ok_or_else(|| bad("per_class_iou value"))?);
        }
        let iou_mode = match text("iou_mode")?.as_str() {
            "pooled" => IouMode::Pooled,
            "per_episode_mean" => IouMode::PerEpisodeMean,
            _ => return Err(bad("iou_mode")),
        };
        Ok(EvalReport {
            per_class_iou,
            miou: num("miou")?,
            fold: uint("fold")?,
            shots: uint("shots")?,
            num_episodes: uint("num_episodes")?,
            config_digest: text("config_digest")?,
            episode_digest: text("episode_digest")?,
            iou_mode,
            status: text("status")?,
        })
    }

    pub fn csv_header() -> &'static str {
        "fold,shots,num_episodes,iou_mode,miou,per_class_iou,status"
    }

    pub fn to_csv_row(&self) -> String {
        let classes: Vec<String> = self
            .per_class_iou
            .iter()
            .map(|(c, v)| format!("{c}:{}", fixed(*v)))
            .collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.fold,
            self.shots,
            self.num_episodes,
            self.iou_mode.name(),
            fixed(self.miou),
            classes.join(" "),
            self.status
        )
    }
}

/// Output formats for a set of reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = FrinetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(FrinetError::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Renders named reports as one document; the summary row averages mIoU over reports.
pub fn format_reports(reports: &[(String, EvalReport)], format: ReportFormat) -> String {
    let mean = exact_mean(&reports.iter().map(|(_, r)| r.miou).collect::<Vec<_>>());
    match format {
        ReportFormat::Json => {
            let mut s = String::from("{\n  \"mean_miou\": ");
            s.push_str(&if reports.is_empty() { "null".into() } else { fixed(mean) });
            s.push_str(",\n  \"reports\": [\n");
            for (i, (name, r)) in reports.iter().enumerate() {
                let body = r.to_json().trim_end().replace('\n', "\n    ");
                let _ = write!(
                    s,
                    "    {{\"name\": {}, \"report\": {body}}}",
                    serde_json::Value::String(name.clone())
                );
                s.push_str(if i + 1 < reports.len() { ",\n" } else { "\n" });
            }
            s.push_str("  ]\n}\n");
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("name,{}\n", EvalReport::csv_header());
            for (name, r) in reports {
                let _ = writeln!(s, "{name},{}", r.to_csv_row());
            }
            s
        }
        ReportFormat::Markdown => {
            let mut s = String::from("| report | fold | shots | episodes | mIoU (%) |\n|---|---|---|---|---|\n");
            for (name, r) in reports {
                let _ = writeln!(
                    s,
                    "| {name} | {} | {} | {} | {:.2} |",
                    r.fold,
                    r.shots,
                    r.num_episodes,
                    r.miou_percent()
                );
            }
            if !reports.is_empty() {
                let _ = writeln!(s, "| mean | | | | {:.2} |", 100.0 * mean);
            }
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_disjoint_predictions() {
        let gt = Array2::from_shape_fn((4, 4), |(y, _)| (y < 2) as u8);
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate(&gt, &gt, 3).unwrap();
        assert_eq!(acc.finalize(IouMode::Pooled).unwrap()[&3], 1.0);
        let mut acc = ConfusionAccumulator::new();
        let inverse = gt.mapv(|v| 1 - v);
        acc.accumulate(&inverse, &gt, 3).unwrap();
        assert_eq!(acc.tallies[&3].intersection, 0);
        assert_eq!(acc.tallies[&3].union, 16);
        assert!(acc.accumulate(&Array2::zeros((3, 4)), &gt, 3).is_err());
    }

    #[test]
    fn ignore_pixels_never_count() {
        let gt = Array2::from_elem((2, 2), IGNORE);
        let mut acc = ConfusionAccumulator::new();
        acc.accumulate(&Array2::ones((2, 2)), &gt, 1).unwrap();
        assert_eq!(acc.tallies[&1].union, 0);
        assert!(matches!(
            acc.finalize(IouMode::Pooled),
            Err(FrinetError::EmptyAccumulator)
        ));
    }

    #[test]
    fn class_mean_is_exact() {
        let per_class: BTreeMap<u8, f64> = [(1, 0.2), (2, 0.4), (3, 0.6)].into_iter().collect();
        assert_eq!(mean_iou(&per_class), 0.4);
        assert_eq!(mean_iou(&[(7u8, 0.5)].into_iter().collect()), 0.5);
    }

    #[test]
    fn pooled_and_per_episode_modes_differ_as_expected() {
        let mut acc = ConfusionAccumulator::new();
        let gt = Array2::from_shape_fn((2, 2), |(y, x)| (y == 0 && x == 0) as u8);
        acc.accumulate(&gt, &gt, 1).unwrap();
        let big_gt = Array2::from_elem((4, 4), 1u8);
        acc.accumulate(&Array2::zeros((4, 4)), &big_gt, 1).unwrap();
        assert_eq!(acc.finalize(IouMode::Pooled).unwrap()[&1], 1.0 / 17.0);
        assert_eq!(acc.finalize(IouMode::PerEpisodeMean).unwrap()[&1], 0.5);
    }

    #[test]
    fn json_is_canonical_and_round_trips() {
        let mut acc = ConfusionAccumulator::new();
        let gt = Array2::from_shape_fn((3, 3), |(y, x)| ((y + x) % 2) as u8);
        acc.accumulate(&gt, &gt, 12).unwrap();
        acc.accumulate(&Array2::ones((3, 3)), &gt, 2).unwrap();
        let r = EvalReport::from_accumulator(&acc, IouMode::Pooled, 1, 1, 2, "abc".into(), "def".into()).unwrap();
        let text = r.to_json();
        assert!(
            text.contains("\"per_class_iou\": {\"12\": 1.000000, \"2\": 0.444444}"),
            "{text}"
        );
        let back = EvalReport::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, Value>>(&text)
            .unwrap()
            .keys()
            .cloned()
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn empty_report_is_flagged() {
        let r = EvalReport::empty(0, 1, "x".into(), IouMode::Pooled);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap().status, STATUS_NO_EPISODES);
    }

    proptest! {
        #[test]
        fn merge_is_additive_and_order_free(bits in proptest::collection::vec(any::<u64>(), 4..12)) {
            let masks: Vec<Array2<u8>> = bits.iter().map(|b| Array2::from_shape_fn((4, 4), |(y, x)| ((b >> (y * 4 + x)) & 1) as u8)).collect();
            let mut whole = ConfusionAccumulator::new();
            let mut left = ConfusionAccumulator::new();
            let mut right = ConfusionAccumulator::new();
            for (i, pair) in masks.windows(2).enumerate() {
                let class = (i % 3) as u8 + 1;
                whole.accumulate(&pair[0], &pair[1], class).unwrap();
                let part = if i % 2 == 0 { &mut left } else { &mut right };
                part.accumulate(&pair[0], &pair[1], class).unwrap();
            }
            let mut merged = right.clone();
            merged.merge(&left);
            prop_assert_eq!(merged.tallies.iter().map(|(c, t)| (*c, t.intersection, t.union)).collect::<Vec<_>>(),
                            whole.tallies.iter().map(|(c, t)| (*c, t.intersection, t.union)).collect::<Vec<_>>());
        }
    }
}
