//! Instruction-following benchmark arithmetic: all-correct VQA case
//! scoring, per-dimension aggregation, five-metric totals, the aspect
//! ratio crop protocol, and a rule-based mock VQA oracle that answers
//! questions from synthetic ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    DynamicAttributes,
    HumanMotion,
    HumanInteraction,
}

impl Dimension {
    pub fn metric_name(self) -> &'static str {
        match self {
            Dimension::DynamicAttributes => "dynamic_attributes",
            Dimension::HumanMotion => "human_motion",
            Dimension::HumanInteraction => "human_interaction",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Question {
    /// Ground-truth predicate, e.g. "block 0 moves right".
    pub predicate: String,
    pub expected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptCase {
    pub dimension: Dimension,
    pub prompt: String,
    /// Reference to the scene file the questions are evaluated against.
    pub scene: String,
    pub questions: Vec<Question>,
}

impl PromptCase {
    pub fn validate(&self) -> Result<()> {
        if self.questions.is_empty() {
            return Err(Error::Config("prompt case has no questions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u64,
    pub y: u64,
    pub w: u64,
    pub h: u64,
}

impl BBox {
    pub fn validate(&self, img_w: u64, img_h: u64) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Config("bbox has zero extent".into()));
        }
        if self.x + self.w > img_w || self.y + self.h > img_h {
            return Err(Error::Config("bbox outside image bounds".into()));
        }
        Ok(())
    }
}

pub const METRIC_NAMES: [&str; 5] = [
    "i2v_subject",
    "i2v_background",
    "dynamic_attributes",
    "human_motion",
    "human_interaction",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub i2v_subject: f64,
    pub i2v_background: f64,
    pub dynamic_attributes: f64,
    pub human_motion: f64,
    pub human_interaction: f64,
    pub total: f64,
}

impl ScoreReport {
    /// Assemble a report from named metrics; total is their mean.
    pub fn from_metrics(metrics: &BTreeMap<String, f64>) -> Result<ScoreReport> {
        for (name, &v) in metrics {
            if !METRIC_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown metric '{name}'")));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("metric '{name}'={v} outside [0,1]")));
            }
        }
        let get = |name: &str| -> Result<f64> {
            metrics
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing metric '{name}'")))
        };
        let report = ScoreReport {
            i2v_subject: get("i2v_subject")?,
            i2v_background: get("i2v_background")?,
            dynamic_attributes: get("dynamic_attributes")?,
            human_motion: get("human_motion")?,
            human_interaction: get("human_interaction")?,
            total: total_score(metrics)?,
        };
        Ok(report)
    }
}

/// 1 iff every answer is correct, else 0.
pub fn vqa_case_score(answers_correct: &[bool]) -> Result<u8> {
    if answers_correct.is_empty() {
        return Err(Error::Config("case has no answers".into()));
    }
    Ok(u8::from(answers_correct.iter().all(|&a| a)))
}

/// Mean of binary case scores.
pub fn dimension_score(case_scores: &[u8]) -> Result<f64> {
    if case_scores.is_empty() {
        return Err(Error::Config("dimension has no cases".into()));
    }
    let sum: u64 = case_scores.iter().map(|&s| u64::from(s)).sum();
    Ok(sum as f64 / case_scores.len() as f64)
}

/// Unweighted mean of the five named metrics; every metric must be present.
pub fn total_score(metrics: &BTreeMap<String, f64>) -> Result<f64> {
    let mut sum = 0.0;
    for name in METRIC_NAMES {
        sum += metrics
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing metric '{name}'")))?;
    }
    Ok(sum / METRIC_NAMES.len() as f64)
}

/// A crop rectangle with its nominal aspect ratio (w:h).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub ratio: (u64, u64),
    pub x: u64,
    pub y: u64,
    pub w: u64,
    pub h: u64,
}

fn crop_at_ratio(img_w: u64, img_h: u64, bbox: &BBox, rw: u64, rh: u64) -> Result<Crop> {
    // maximal rectangle of ratio rw:rh inside the image, dims floored
    let (w, h) = if img_w * rh >= img_h * rw {
        (img_h * rw / rh, img_h)
    } else {
        (img_w, img_w * rh / rw)
    };
    if bbox.w > w || bbox.h > h {
        return Err(Error::Config("subject exceeds crop".into()));
    }
    // center on the bbox center, then clamp into the image
    let place = |img: u64, crop: u64, b0: u64, bext: u64| -> u64 {
        let centered = (2 * b0 + bext).saturating_sub(crop) / 2;
        centered.min(img - crop).min(b0).max((b0 + bext).saturating_sub(crop))
    };
    let x = place(img_w, w, bbox.x, bbox.w);
    let y = place(img_h, h, bbox.y, bbox.h);
    Ok(Crop { ratio: (rw, rh), x, y, w, h })
}

/// Portrait images get a 16:9 crop then a 1:1 crop; landscape and square
/// images get 1:1 then 16:9. Each crop is the maximal rectangle of its
/// ratio that fits the image, centered on the subject box and clamped.
pub fn crop_protocol(img_w: u64, img_h: u64, bbox: &BBox) -> Result<Vec<Crop>> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::Config("image has zero extent".into()));
    }
    bbox.validate(img_w, img_h)?;
    let ratios: [(u64, u64); 2] = if img_h > img_w {
        [(16, 9), (1, 1)]
    } else {
        [(1, 1), (16, 9)]
    };
    ratios
        .iter()
        .map(|&(rw, rh)| crop_at_ratio(img_w, img_h, bbox, rw, rh))
        .collect()
}

/// Deterministic predicate evaluation on ground-truth trajectories.
///
/// Grammar: "block <i> moves", "block <i> static",
/// "block <i> moves right|left|up|down".
pub fn mock_vqa(question: &str, scene: &SceneSpec) -> Result<bool> {
    let unknown = || Error::Config(format!("unknown predicate '{question}'"));
    let mut parts = question.split_whitespace();
    if parts.next() != Some("block") {
        return Err(unknown());
    }
    let index: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(unknown)?;
    if index >= scene.blocks.len() {
        return Err(Error::Config(format!(
            "predicate references block {index} but scene has {}",
            scene.blocks.len()
        )));
    }
    let (dy, dx) = scene.blocks[index].motion;
    let answer = match (parts.next(), parts.next(), parts.next()) {
        (Some("static"), None, _) => dy == 0 && dx == 0,
        (Some("moves"), None, _) => dy != 0 || dx != 0,
        (Some("moves"), Some("right"), None) => dx > 0,
        (Some("moves"), Some("left"), None) => dx < 0,
        (Some("moves"), Some("down"), None) => dy > 0,
        (Some("moves"), Some("up"), None) => dy < 0,
        _ => return Err(unknown()),
    };
    Ok(answer)
}

/// Score a single case against its scene: 1 iff mock VQA agrees with every
/// expected answer.
pub fn score_case(case: &PromptCase, scene: &SceneSpec) -> Result<u8> {
    case.validate()?;
    let correct = case
        .questions
        .iter()
        .map(|q| Ok(mock_vqa(&q.predicate, scene)? == q.expected))
        .collect::<Result<Vec<bool>>>()?;
    vqa_case_score(&correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{BlockSpec, SceneSpec};

    fn metrics(vals: [f64; 5]) -> BTreeMap<String, f64> {
        METRIC_NAMES
            .iter()
            .zip(vals)
            .map(|(n, v)| (n.to_string(), v))
            .collect()
    }

    #[test]
    fn case_score_is_logical_and() {
        assert_eq!(vqa_case_score(&[true, true, true]).unwrap(), 1);
        assert_eq!(vqa_case_score(&[true, false, true]).unwrap(), 0);
        assert_eq!(vqa_case_score(&[false]).unwrap(), 0);
        assert!(vqa_case_score(&[]).is_err());
    }

    #[test]
    fn dimension_score_is_mean() {
        assert_eq!(dimension_score(&[1, 1, 1]).unwrap(), 1.0);
        let mut scores = vec![1u8; 75];
        scores.extend(vec![0u8; 25]);
        assert_eq!(dimension_score(&scores).unwrap(), 0.75);
        let mut reversed = scores.clone();
        reversed.reverse();
        assert_eq!(
            dimension_score(&scores).unwrap(),
            dimension_score(&reversed).unwrap()
        );
        assert!(dimension_score(&[]).is_err());
    }

    #[test]
    fn total_matches_published_model_comparison_rows() {
        // published four-decimal component scores and their totals
        let rows: [([f64; 5], f64); 9] = [
            ([0.9658, 0.9787, 0.1279, 0.6100, 0.4500], 0.6265),
            ([0.9630, 0.9781, 0.1047, 0.4300, 0.4400], 0.5832),
            ([0.9845, 0.9893, 0.2558, 0.4800, 0.3500], 0.6119),
            ([0.9685, 0.9870, 0.3512, 0.6920, 0.4880], 0.6973),
            ([0.9858, 0.9941, 0.1512, 0.7000, 0.3700], 0.6402),
            ([0.9886, 0.9942, 0.1698, 0.2600, 0.1800], 0.5185),
            ([0.9867, 0.9916, 0.0465, 0.7100, 0.3200], 0.6110),
            ([0.9694, 0.9875, 0.3860, 0.7500, 0.5320], 0.7250),
            ([0.9867, 0.9937, 0.2270, 0.3480, 0.2300], 0.5571),
        ];
        for (components, expected) in rows {
            let total = total_score(&metrics(components)).unwrap();
            assert!(
                (total - expected).abs() < 5e-5,
                "components {components:?}: got {total}, want {expected}"
            );
        }
    }

    #[test]
    fn total_constant_components() {
        let total = total_score(&metrics([0.4; 5])).unwrap();
        assert!((total - 0.4).abs() < 1e-15);
    }

    #[test]
    fn total_rejects_missing_metric() {
        let mut m = metrics([0.5; 5]);
        m.remove("human_motion");
        assert!(total_score(&m).is_err());
    }

    #[test]
    fn report_rejects_out_of_range_metric() {
        assert!(ScoreReport::from_metrics(&metrics([1.5, 0.5, 0.5, 0.5, 0.5])).is_err());
        let report = ScoreReport::from_metrics(&metrics([1.0; 5])).unwrap();
        assert_eq!(report.total, 1.0);
    }

    fn centered_bbox(img_w: u64, img_h: u64) -> BBox {
        BBox {
            x: img_w / 2 - 20,
            y: img_h / 2 - 20,
            w: 40,
            h: 40,
        }
    }

    #[test]
    fn portrait_crops_are_16_9_then_1_1() {
        let crops = crop_protocol(1080, 1920, &centered_bbox(1080, 1920)).unwrap();
        assert_eq!(crops.len(), 2);
        assert_eq!((crops[0].w, crops[0].h), (1080, 607));
        assert_eq!(crops[0].ratio, (16, 9));
        assert_eq!((crops[1].w, crops[1].h), (1080, 1080));
        assert_eq!(crops[1].ratio, (1, 1));
        // centered on the bbox center, up to integer flooring
        let center = crops[0].y + crops[0].h / 2;
        assert!(center.abs_diff(1920 / 2) <= 1, "center {center}");
    }

    #[test]
    fn landscape_crops_are_1_1_then_16_9() {
        let crops = crop_protocol(1920, 1080, &centered_bbox(1920, 1080)).unwrap();
        assert_eq!((crops[0].w, crops[0].h), (1080, 1080));
        assert_eq!((crops[1].w, crops[1].h), (1920, 1080));
    }

    #[test]
    fn square_follows_landscape_order() {
        let crops = crop_protocol(1000, 1000, &centered_bbox(1000, 1000)).unwrap();
        assert_eq!(crops[0].ratio, (1, 1));
        assert_eq!(crops[1].ratio, (16, 9));
    }

    #[test]
    fn edge_bbox_clamps_but_stays_inside() {
        let bbox = BBox { x: 100, y: 0, w: 50, h: 50 };
        let crops = crop_protocol(1080, 1920, &bbox).unwrap();
        for c in &crops {
            assert!(c.x + c.w <= 1080 && c.y + c.h <= 1920);
            assert!(c.x <= bbox.x && c.y <= bbox.y);
            assert!(bbox.x + bbox.w <= c.x + c.w);
            assert!(bbox.y + bbox.h <= c.y + c.h);
        }
        assert_eq!(crops[0].y, 0);
    }

    #[test]
    fn crop_ratio_within_one_pixel() {
        for &(img_w, img_h) in &[(1080u64, 1920u64), (1920, 1080), (733, 1217), (1217, 733)] {
            let bbox = BBox { x: img_w / 3, y: img_h / 3, w: 30, h: 30 };
            for c in crop_protocol(img_w, img_h, &bbox).unwrap() {
                let (rw, rh) = c.ratio;
                let ideal_h = c.w as f64 * rh as f64 / rw as f64;
                assert!(
                    (c.h as f64 - ideal_h).abs() <= 1.0,
                    "{img_w}x{img_h} ratio {rw}:{rh} crop {}x{}",
                    c.w,
                    c.h
                );
            }
        }
    }

    #[test]
    fn oversized_subject_is_rejected() {
        let bbox = BBox { x: 0, y: 0, w: 1080, h: 1900 };
        let err = crop_protocol(1080, 1920, &bbox).unwrap_err();
        assert!(err.to_string().contains("subject exceeds crop"));
    }

    fn moving_scene() -> SceneSpec {
        SceneSpec {
            frames: 3,
            height: 8,
            width: 8,
            channels: 2,
            background: vec![0.1, 0.1],
            noise_sigma: 0.0,
            blocks: vec![
                BlockSpec {
                    y: 1,
                    x: 1,
                    h: 2,
                    w: 2,
                    signature: vec![1.0, 0.0],
                    motion: (0, 1),
                    bound: true,
                },
                BlockSpec {
                    y: 5,
                    x: 5,
                    h: 1,
                    w: 1,
                    signature: vec![0.0, 1.0],
                    motion: (0, 0),
                    bound: true,
                },
            ],
        }
    }

    #[test]
    fn mock_vqa_evaluates_motion_predicates() {
        let scene = moving_scene();
        assert!(mock_vqa("block 0 moves right", &scene).unwrap());
        assert!(!mock_vqa("block 0 moves left", &scene).unwrap());
        assert!(!mock_vqa("block 0 static", &scene).unwrap());
        assert!(mock_vqa("block 1 static", &scene).unwrap());
        assert!(!mock_vqa("block 1 moves", &scene).unwrap());
        // determinism
        assert_eq!(
            mock_vqa("block 0 moves", &scene).unwrap(),
            mock_vqa("block 0 moves", &scene).unwrap()
        );
    }

    #[test]
    fn mock_vqa_rejects_unknown_predicates() {
        let scene = moving_scene();
        assert!(mock_vqa("block 0 teleports", &scene).is_err());
        assert!(mock_vqa("sphere 0 moves", &scene).is_err());
        assert!(mock_vqa("block 9 moves", &scene).is_err());
    }

    #[test]
    fn score_case_all_correct_rule() {
        let scene = moving_scene();
        let case = PromptCase {
            dimension: Dimension::HumanMotion,
            prompt: "the first block slides right".into(),
            scene: "scene.json".into(),
            questions: vec![
                Question { predicate: "block 0 moves right".into(), expected: true },
                Question { predicate: "block 1 static".into(), expected: true },
            ],
        };
        assert_eq!(score_case(&case, &scene).unwrap(), 1);
        let mut wrong = case.clone();
        wrong.questions[1].expected = false;
        assert_eq!(score_case(&wrong, &scene).unwrap(), 0);
    }
}
