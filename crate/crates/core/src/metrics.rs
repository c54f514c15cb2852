//! ADD / ADD-S / n°n cm pose metrics, recall tables and their text/CSV forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{block_catalog, geodesic_angle, sym_align, BlockModel, Pose, Rotation3};
use crate::parallel::thread_pool;
use crate::scene::DatasetRecord;

pub const ADD_FRACTIONS: [f64; 3] = [0.02, 0.05, 0.1];
pub const DEG_CM: [f64; 2] = [2.0, 5.0];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no prediction for record {0}")]
    MissingPrediction(u64),
    #[error("duplicate prediction for record {0}")]
    DuplicatePrediction(u64),
    #[error("unknown block id {0}")]
    UnknownBlock(u8),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mean distance between corresponding model points under the two poses (mm).
pub fn add_metric(pred: &Pose, gt: &Pose, model: &BlockModel) -> f64 {
    let sum: f64 = model
        .vertices
        .iter()
        .map(|x| (pred.transform_point(x) - gt.transform_point(x)).norm())
        .sum();
    sum / model.vertices.len() as f64
}

/// Mean distance from each gt-transformed vertex to the nearest pred-transformed vertex (mm).
///
/// Nearest neighbours come from a sweep over pred points sorted by x.
pub fn adds_metric(pred: &Pose, gt: &Pose, model: &BlockModel) -> f64 {
    let mut cloud: Vec<Vector3<f64>> = model.vertices.iter().map(|x| pred.transform_point(x)).collect();
    cloud.sort_by(|a, b| a.x.total_cmp(&b.x));
    let sum: f64 = model
        .vertices
        .iter()
        .map(|x| nearest_sq(&cloud, &gt.transform_point(x)).sqrt())
        .sum();
    sum / model.vertices.len() as f64
}

fn nearest_sq(sorted: &[Vector3<f64>], q: &Vector3<f64>) -> f64 {
    let start = sorted.partition_point(|p| p.x < q.x);
    let mut best = f64::INFINITY;
    for p in &sorted[start..] {
        let dx = p.x - q.x;
        if dx * dx >= best {
            break;
        }
        best = best.min((p - q).norm_squared());
    }
    for p in sorted[..start].iter().rev() {
        let dx = q.x - p.x;
        if dx * dx >= best {
            break;
        }
        best = best.min((p - q).norm_squared());
    }
    best
}

/// ADD-S for blocks with a non-trivial symmetry group, ADD otherwise.
pub fn add_or_adds(pred: &Pose, gt: &Pose, model: &BlockModel) -> f64 {
    if model.is_symmetric() {
        adds_metric(pred, gt, model)
    } else {
        add_metric(pred, gt, model)
    }
}

/// Rotation error (degrees, minimized over the symmetry group) and translation error (cm).
pub fn deg_cm(pred: &Pose, gt: &Pose, sym: &[Rotation3]) -> (f64, f64) {
    let aligned = sym_align(&gt.rot, &pred.rot, sym);
    (geodesic_angle(&aligned, &pred.rot), (pred.t - gt.t).norm() / 10.0)
}

/// Per-record predicted poses, as stored in predictions JSON lines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: u64,
    #[serde(rename = "P_target")]
    pub target: Pose,
    #[serde(rename = "P_base")]
    pub base: Pose,
    #[serde(rename = "P_assembly")]
    pub assembly: Pose,
}

impl Prediction {
    /// Predictions equal to a record's ground truth.
    pub fn oracle(rec: &DatasetRecord) -> Self {
        Self {
            record_id: rec.id,
            target: rec.gt.target,
            base: rec.gt.base,
            assembly: rec.gt.assembly,
        }
    }
}

pub fn write_predictions<W: Write>(mut w: W, preds: &[Prediction]) -> Result<(), MetricsError> {
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<Prediction>, MetricsError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Recall percentages for one block (or the mean row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub label: String,
    pub n: usize,
    /// ADD(-S) recall at 0.02d, 0.05d, 0.1d.
    pub add: [f64; 3],
    /// 2°2cm and 5°5cm recall.
    pub deg_cm: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub rows: Vec<RecallRow>,
    pub mean: RecallRow,
}

/// Object-pose (base and target) and assembly-pose recall tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub object: RecallTable,
    pub assembly: RecallTable,
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    n: usize,
    add: [usize; 3],
    deg_cm: [usize; 2],
}

/// One scored sample: which block, and the pass flags.
#[derive(Clone, Copy, Debug)]
pub struct SampleScore {
    pub block_id: u8,
    pub add_mm: f64,
    pub deg: f64,
    pub cm: f64,
}

pub fn score(pred: &Pose, gt: &Pose, model: &BlockModel) -> SampleScore {
    let (deg, cm) = deg_cm(pred, gt, &model.sym_group);
    SampleScore {
        block_id: model.id,
        add_mm: add_or_adds(pred, gt, model),
        deg,
        cm,
    }
}

fn tabulate(scores: &[SampleScore]) -> RecallTable {
    let cat = block_catalog();
    let mut counts: BTreeMap<u8, Counts> = BTreeMap::new();
    for s in scores {
        let d = cat.get(s.block_id).map(|m| m.diameter).unwrap_or(f64::NAN);
        let c = counts.entry(s.block_id).or_default();
        c.n += 1;
        for (k, frac) in ADD_FRACTIONS.iter().enumerate() {
            if s.add_mm < frac * d {
                c.add[k] += 1;
            }
        }
        for (k, lim) in DEG_CM.iter().enumerate() {
            if s.deg < *lim && s.cm < *lim {
                c.deg_cm[k] += 1;
            }
        }
    }
    let pct = |num: usize, n: usize| 100.0 * num as f64 / n as f64;
    let rows: Vec<RecallRow> = counts
        .iter()
        .map(|(id, c)| RecallRow {
            label: cat.get(*id).map(|m| m.name.clone()).unwrap_or_else(|| id.to_string()),
            n: c.n,
            add: c.add.map(|x| pct(x, c.n)),
            deg_cm: c.deg_cm.map(|x| pct(x, c.n)),
        })
        .collect();
    let m = rows.len().max(1) as f64;
    let mean = RecallRow {
        label: "mean".into(),
        n: rows.iter().map(|r| r.n).sum(),
        add: std::array::from_fn(|k| rows.iter().map(|r| r.add[k]).sum::<f64>() / m),
        deg_cm: std::array::from_fn(|k| rows.iter().map(|r| r.deg_cm[k]).sum::<f64>() / m),
    };
    RecallTable { rows, mean }
}

/// Scores every record. Object rows pool base and target poses by their own
/// block; assembly rows are grouped by target block.
pub fn recall_table(records: &[DatasetRecord], preds: &[Prediction]) -> Result<MetricsReport, MetricsError> {
    let mut by_id: BTreeMap<u64, &Prediction> = BTreeMap::new();
    for p in preds {
        if by_id.insert(p.record_id, p).is_some() {
            return Err(MetricsError::DuplicatePrediction(p.record_id));
        }
    }
    let cat = block_catalog();
    let per_record: Vec<[SampleScore; 3]> = thread_pool().install(|| {
        records
            .par_iter()
            .map(|r| {
                let p = by_id.get(&r.id).ok_or(MetricsError::MissingPrediction(r.id))?;
                let bm = cat.get(r.base_block()).ok_or(MetricsError::UnknownBlock(r.base_block()))?;
                let tm = cat.get(r.target_block()).ok_or(MetricsError::UnknownBlock(r.target_block()))?;
                Ok([
                    score(&p.base, &r.gt.base, bm),
                    score(&p.target, &r.gt.target, tm),
                    score(&p.assembly, &r.gt.assembly, tm),
                ])
            })
            .collect::<Result<Vec<_>, MetricsError>>()
    })?;
    let object: Vec<SampleScore> = per_record.iter().flat_map(|s| [s[0], s[1]]).collect();
    let assembly: Vec<SampleScore> = per_record.iter().map(|s| s[2]).collect();
    Ok(MetricsReport {
        object: tabulate(&object),
        assembly: tabulate(&assembly),
    })
}

/// Recall table from already-scored samples.
pub fn recall_from_scores(scores: &[SampleScore]) -> RecallTable {
    tabulate(scores)
}

const CSV_HEADER: &str = "table,block,n,add_0.02d,add_0.05d,add_0.1d,2deg2cm,5deg5cm";

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (name, t) in [("object", &self.object), ("assembly", &self.assembly)] {
            for r in t.rows.iter().chain(std::iter::once(&t.mean)) {
                let _ = writeln!(
                    s,
                    "{name},{},{},{:.2},{:.2},{:.2},{:.2},{:.2}",
                    r.label, r.n, r.add[0], r.add[1], r.add[2], r.deg_cm[0], r.deg_cm[1]
                );
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let bad = |m: &str| MetricsError::MalformedReport(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(bad("unexpected header"));
        }
        let mut tables: BTreeMap<String, (Vec<RecallRow>, Option<RecallRow>)> = BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 8 {
                return Err(bad(&format!("expected 8 fields: {line}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("not a number: {s}")));
            let row = RecallRow {
                label: f[1].to_string(),
                n: f[2].parse().map_err(|_| bad("bad count"))?,
                add: [num(f[3])?, num(f[4])?, num(f[5])?],
                deg_cm: [num(f[6])?, num(f[7])?],
            };
            let entry = tables.entry(f[0].to_string()).or_default();
            if row.label == "mean" {
                entry.1 = Some(row);
            } else {
                entry.0.push(row);
            }
        }
        let mut take = |name: &str| -> Result<RecallTable, MetricsError> {
            let (rows, mean) = tables.remove(name).ok_or_else(|| bad(&format!("missing {name} table")))?;
            Ok(RecallTable {
                rows,
                mean: mean.ok_or_else(|| bad(&format!("missing {name} mean row")))?,
            })
        };
        Ok(Self {
            object: take("object")?,
            assembly: take("assembly")?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (title, t) in [("6D object pose", &self.object), ("6D assembly pose", &self.assembly)] {
            let _ = writeln!(s, "{title}");
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "block", "n", "0.02d", "0.05d", "0.1d", "2°2cm", "5°5cm"
            );
            for r in t.rows.iter().chain(std::iter::once(&t.mean)) {
                let _ = writeln!(
                    s,
                    "{:<10} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                    r.label, r.n, r.add[0], r.add[1], r.add[2], r.deg_cm[0], r.deg_cm[1]
                );
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..180.0));
        Pose::new(
            rot,
            Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(400.0..1600.0)),
        )
    }

    fn brute_adds(pred: &Pose, gt: &Pose, model: &BlockModel) -> f64 {
        let p: Vec<_> = model.vertices.iter().map(|x| pred.transform_point(x)).collect();
        let mut sum = 0.0;
        for x in &model.vertices {
            let g = gt.transform_point(x);
            sum += p.iter().map(|q| (q - g).norm()).fold(f64::INFINITY, f64::min);
        }
        sum / model.vertices.len() as f64
    }

    #[test]
    fn add_identity_and_translation() {
        let cube = block_catalog().by_name("cube").unwrap();
        let gt = Pose::from_translation(Vector3::new(0.0, 0.0, 700.0));
        assert_eq!(add_metric(&gt, &gt, cube), 0.0);
        let shifted = Pose::from_translation(Vector3::new(3.0, 0.0, 700.0));
        assert!((add_metric(&shifted, &gt, cube) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adds_zero_under_symmetry_and_bounded_by_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in block_catalog().blocks() {
            let gt = random_pose(&mut rng);
            for s in &b.sym_group {
                let pred = Pose::new(gt.rot * *s, gt.t);
                assert!(adds_metric(&pred, &gt, b) <= 1e-6, "{}", b.name);
                assert!(deg_cm(&pred, &gt, &b.sym_group).0 < 1e-6);
            }
            let pred = random_pose(&mut rng);
            assert!(adds_metric(&pred, &gt, b) <= add_metric(&pred, &gt, b) + 1e-12);
        }
    }

    #[test]
    fn adds_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in block_catalog().blocks() {
            for _ in 0..5 {
                let gt = random_pose(&mut rng);
                let mut pred = random_pose(&mut rng);
                pred.t = gt.t + Vector3::new(5.0, -3.0, 8.0);
                assert!((adds_metric(&pred, &gt, b) - brute_adds(&pred, &gt, b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deg_cm_cases() {
        let gt = Pose::from_translation(Vector3::new(0.0, 0.0, 500.0));
        assert_eq!(deg_cm(&gt, &gt, &[Rotation3::identity()]), (0.0, 0.0));
        let pred = Pose::new(Rotation3::rz(30.0), Vector3::new(0.0, 50.0, 500.0));
        let (d, cm) = deg_cm(&pred, &gt, &[Rotation3::identity()]);
        assert!((d - 30.0).abs() < 1e-9 && (cm - 5.0).abs() < 1e-12);
        let z4 = block_catalog().by_name("cube").unwrap();
        let pred = Pose::new(Rotation3::rz(100.0), gt.t);
        assert!((deg_cm(&pred, &gt, &z4.sym_group).0 - 10.0).abs() < 1e-9);
    }

    fn synthetic_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<SampleScore> {
        (0..n)
            .map(|_| SampleScore {
                block_id: rng.random_range(1..=7),
                add_mm: rng.random_range(0.0..20.0),
                deg: rng.random_range(0.0..8.0),
                cm: rng.random_range(0.0..8.0),
            })
            .collect()
    }

    #[test]
    fn recall_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = recall_from_scores(&synthetic_scores(&mut rng, 200));
            for r in t.rows.iter().chain(std::iter::once(&t.mean)) {
                assert!(r.add[0] <= r.add[1] && r.add[1] <= r.add[2]);
                assert!(r.deg_cm[0] <= r.deg_cm[1]);
                assert!(r.add.iter().chain(&r.deg_cm).all(|v| (0.0..=100.0).contains(v)));
            }
        }
    }

    #[test]
    fn mean_row_is_unweighted() {
        let cube = SampleScore { block_id: 2, add_mm: 0.0, deg: 0.0, cm: 0.0 };
        let miss = SampleScore { block_id: 3, add_mm: 1e9, deg: 90.0, cm: 90.0 };
        let mut scores = vec![cube; 9];
        scores.push(miss);
        let t = recall_from_scores(&scores);
        assert_eq!(t.mean.add, [50.0; 3]);
        assert_eq!(t.mean.n, 10);
    }

    #[test]
    fn csv_round_trip_at_two_decimals() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = recall_from_scores(&synthetic_scores(&mut rng, 333));
        let report = MetricsReport { object: t.clone(), assembly: t };
        let csv = report.to_csv();
        let back = MetricsReport::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        for (a, b) in report.object.rows.iter().zip(&back.object.rows) {
            for k in 0..3 {
                assert!((a.add[k] - b.add[k]).abs() <= 0.005 + 1e-9);
            }
        }
        assert!(MetricsReport::from_csv("nope").is_err());
    }
}
