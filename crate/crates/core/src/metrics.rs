//! Overlap metrics on binary planes and their aggregation into reports.
//!
//! Per slice and class: IoU `|P∩G| / |P∪G|` (1 when both are empty), Dice
//! `(2|P∩G| + 1) / (|P| + |G| + 1)`, raw Dice `2|P∩G| / (|P| + |G|)`,
//! precision `|P∩G| / |P|` and recall `|P∩G| / |G|`. Undefined ratios are
//! excluded from means rather than counted as zero.

use std::io::Write;

use crate::error::{Error, Result};

pub const AGGREGATION: &str = "per-slice per-class, mean over annotated test slices, then over classes";
pub const CSV_SCHEMA: &str = "eval.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn truth(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn dice_smoothed(&self) -> f64 {
        (2 * self.tp + 1) as f64 / (self.predicted() + self.truth() + 1) as f64
    }

    pub fn dice_raw(&self) -> Option<f64> {
        let den = self.predicted() + self.truth();
        (den > 0).then(|| (2 * self.tp) as f64 / den as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        (self.predicted() > 0).then(|| self.tp as f64 / self.predicted() as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.truth() > 0).then(|| self.tp as f64 / self.truth() as f64)
    }
}

/// Confusion counts per class for `d` stacked binary planes.
pub fn class_counts(pred: &[u8], truth: &[u8], classes: usize) -> Result<Vec<Counts>> {
    if pred.len() != truth.len() || classes == 0 || pred.len() % classes != 0 {
        return Err(Error::Shape(format!(
            "prediction ({}) and ground truth ({}) do not form {classes} matching planes",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() / classes;
    Ok((0..classes)
        .map(|k| {
            let mut c = Counts::default();
            for (&p, &g) in pred[k * n..(k + 1) * n].iter().zip(&truth[k * n..(k + 1) * n]) {
                match (p != 0, g != 0) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    _ => {}
                }
            }
            c
        })
        .collect())
}

/// Per-class values plus their mean over defined classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClass {
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

fn per_class(counts: &[Counts], f: impl Fn(&Counts) -> Option<f64>) -> PerClass {
    let values: Vec<Option<f64>> = counts.iter().map(f).collect();
    PerClass { mean: mean(values.iter().flatten().copied()), values }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn iou(pred: &[u8], truth: &[u8], classes: usize) -> Result<PerClass> {
    Ok(per_class(&class_counts(pred, truth, classes)?, |c| Some(c.iou())))
}

pub fn dice(pred: &[u8], truth: &[u8], classes: usize) -> Result<PerClass> {
    Ok(per_class(&class_counts(pred, truth, classes)?, |c| Some(c.dice_smoothed())))
}

pub fn dice_raw(pred: &[u8], truth: &[u8], classes: usize) -> Result<PerClass> {
    Ok(per_class(&class_counts(pred, truth, classes)?, Counts::dice_raw))
}

pub fn precision(pred: &[u8], truth: &[u8], classes: usize) -> Result<PerClass> {
    Ok(per_class(&class_counts(pred, truth, classes)?, Counts::precision))
}

pub fn recall(pred: &[u8], truth: &[u8], classes: usize) -> Result<PerClass> {
    Ok(per_class(&class_counts(pred, truth, classes)?, Counts::recall))
}

/// Running per-class sums over slices.
#[derive(Debug, Clone, Default, PartialEq)]
struct Accum {
    sum: f64,
    n: usize,
}

impl Accum {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }
    fn mean_pct(&self) -> Option<f64> {
        (self.n > 0).then(|| 100.0 * self.sum / self.n as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub name: String,
    /// Percentages; `None` when undefined on every slice.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub dice_raw: Option<f64>,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub test_order: String,
    pub slices: usize,
    pub classes: Vec<ClassReport>,
}

/// Builds an [`EvalReport`] one slice at a time.
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    names: Vec<String>,
    slices: usize,
    acc: Vec<[Accum; 5]>,
    totals: Vec<Counts>,
}

impl ReportBuilder {
    pub fn new(class_names: &[String]) -> Self {
        ReportBuilder {
            names: class_names.to_vec(),
            slices: 0,
            acc: vec![Default::default(); class_names.len()],
            totals: vec![Counts::default(); class_names.len()],
        }
    }

    /// Adds one annotated slice given its binary prediction and truth planes.
    pub fn add_slice(&mut self, pred: &[u8], truth: &[u8]) -> Result<Vec<Counts>> {
        let counts = class_counts(pred, truth, self.names.len())?;
        for ((acc, total), c) in self.acc.iter_mut().zip(self.totals.iter_mut()).zip(&counts) {
            acc[0].push(c.precision());
            acc[1].push(c.recall());
            acc[2].push(Some(c.iou()));
            acc[3].push(Some(c.dice_smoothed()));
            acc[4].push(c.dice_raw());
            total.tp += c.tp;
            total.fp += c.fp;
            total.fn_ += c.fn_;
        }
        self.slices += 1;
        Ok(counts)
    }

    pub fn finish(self, model: &str, test_order: &str) -> EvalReport {
        let classes = self
            .names
            .into_iter()
            .zip(self.acc)
            .zip(self.totals)
            .map(|((name, a), counts)| ClassReport {
                name,
                precision: a[0].mean_pct(),
                recall: a[1].mean_pct(),
                iou: a[2].mean_pct(),
                dice: a[3].mean_pct(),
                dice_raw: a[4].mean_pct(),
                counts,
            })
            .collect();
        EvalReport { model: model.to_string(), test_order: test_order.to_string(), slices: self.slices, classes }
    }
}

impl EvalReport {
    fn class_mean(&self, f: impl Fn(&ClassReport) -> Option<f64>) -> Option<f64> {
        mean(self.classes.iter().filter_map(f))
    }

    pub fn mean_precision(&self) -> Option<f64> {
        self.class_mean(|c| c.precision)
    }

    pub fn mean_recall(&self) -> Option<f64> {
        self.class_mean(|c| c.recall)
    }

    pub fn mean_iou(&self) -> Option<f64> {
        self.class_mean(|c| c.iou)
    }

    /// Mean smoothed Dice over classes, in percent.
    pub fn mean_dice(&self) -> Option<f64> {
        self.class_mean(|c| c.dice)
    }

    pub fn mean_dice_raw(&self) -> Option<f64> {
        self.class_mean(|c| c.dice_raw)
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "schema", "model", "test_order", "class", "Pr", "Re", "IoU", "Dice", "dice_smoothed", "dice_raw", "tp", "fp",
        "fn", "slices", "aggregation",
    ];

    fn rows(&self) -> Vec<Vec<String>> {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        let mut rows: Vec<Vec<String>> = self
            .classes
            .iter()
            .map(|c| {
                vec![
                    CSV_SCHEMA.into(),
                    self.model.clone(),
                    self.test_order.clone(),
                    c.name.clone(),
                    fmt(c.precision),
                    fmt(c.recall),
                    fmt(c.iou),
                    fmt(c.dice),
                    fmt(c.dice),
                    fmt(c.dice_raw),
                    c.counts.tp.to_string(),
                    c.counts.fp.to_string(),
                    c.counts.fn_.to_string(),
                    self.slices.to_string(),
                    AGGREGATION.into(),
                ]
            })
            .collect();
        let total = self.classes.iter().fold(Counts::default(), |a, c| Counts {
            tp: a.tp + c.counts.tp,
            fp: a.fp + c.counts.fp,
            fn_: a.fn_ + c.counts.fn_,
        });
        rows.push(vec![
            CSV_SCHEMA.into(),
            self.model.clone(),
            self.test_order.clone(),
            "mean".into(),
            fmt(self.mean_precision()),
            fmt(self.mean_recall()),
            fmt(self.mean_iou()),
            fmt(self.mean_dice()),
            fmt(self.mean_dice()),
            fmt(self.mean_dice_raw()),
            total.tp.to_string(),
            total.fp.to_string(),
            total.fn_.to_string(),
            self.slices.to_string(),
            AGGREGATION.into(),
        ]);
        rows
    }

    /// Writes the header and one row per class plus a `mean` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_reports_csv(std::slice::from_ref(self), writer)
    }
}

/// Writes several reports under a single header.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(EvalReport::CSV_HEADER).map_err(err)?;
    for r in reports {
        for row in r.rows() {
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand::Rng;

    #[test]
    fn hand_example() {
        let p = [1, 1, 0, 0];
        let g = [1, 0, 0, 0];
        assert_eq!(iou(&p, &g, 1).unwrap().values, vec![Some(0.5)]);
        assert_eq!(dice(&p, &g, 1).unwrap().values, vec![Some(0.75)]);
        assert_eq!(precision(&p, &g, 1).unwrap().values, vec![Some(0.5)]);
        assert_eq!(recall(&p, &g, 1).unwrap().values, vec![Some(1.0)]);
    }

    #[test]
    fn empty_and_perfect_cases() {
        let z = [0u8; 4];
        assert_eq!(iou(&z, &z, 1).unwrap().values, vec![Some(1.0)]);
        assert_eq!(dice(&z, &z, 1).unwrap().values, vec![Some(1.0)]);
        assert_eq!(dice_raw(&z, &z, 1).unwrap().mean, None);
        let g = [0, 1, 1, 0];
        assert_eq!(precision(&z, &g, 1).unwrap().values, vec![None]);
        assert_eq!(recall(&z, &g, 1).unwrap().values, vec![Some(0.0)]);
        assert_eq!(dice(&g, &g, 1).unwrap().values, vec![Some(1.0)]);
        assert_eq!(precision(&g, &g, 1).unwrap().values, vec![Some(1.0)]);
        assert_eq!(iou(&[0, 1, 0, 0], &[1, 0, 0, 0], 1).unwrap().values, vec![Some(0.0)]);
        assert!(iou(&[0; 4], &[0; 6], 1).is_err());
    }

    /// Independent per-pixel oracle using nested index loops over a 2-D view.
    fn oracle(p: &[Vec<Vec<u8>>], g: &[Vec<Vec<u8>>]) -> Vec<[Option<(u64, u64)>; 4]> {
        p.iter()
            .zip(g)
            .map(|(pc, gc)| {
                let (mut inter, mut uni, mut np, mut ng) = (0u64, 0u64, 0u64, 0u64);
                for y in 0..pc.len() {
                    for x in 0..pc[y].len() {
                        let (a, b) = (pc[y][x] == 1, gc[y][x] == 1);
                        inter += (a && b) as u64;
                        uni += (a || b) as u64;
                        np += a as u64;
                        ng += b as u64;
                    }
                }
                [
                    Some(if uni == 0 { (1, 1) } else { (inter, uni) }),
                    Some((2 * inter + 1, np + ng + 1)),
                    (np > 0).then_some((inter, np)),
                    (ng > 0).then_some((inter, ng)),
                ]
            })
            .collect()
    }

    #[test]
    fn matches_pixel_counting_oracle_on_random_cases() {
        let mut rng = RngStream::new(2024).rng();
        for case in 0..1000 {
            let d = rng.gen_range(1..=3);
            let density: f64 = rng.gen_range(0.0..1.0);
            let planes = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<Vec<u8>>> {
                (0..d).map(|_| (0..8).map(|_| (0..8).map(|_| rng.gen_bool(density) as u8).collect()).collect()).collect()
            };
            let (p, g) = (planes(&mut rng), planes(&mut rng));
            let flat = |v: &Vec<Vec<Vec<u8>>>| v.iter().flatten().flatten().copied().collect::<Vec<u8>>();
            let (pf, gf) = (flat(&p), flat(&g));
            let want = oracle(&p, &g);
            let got = [
                iou(&pf, &gf, d).unwrap(),
                dice(&pf, &gf, d).unwrap(),
                precision(&pf, &gf, d).unwrap(),
                recall(&pf, &gf, d).unwrap(),
            ];
            for k in 0..d {
                for m in 0..4 {
                    let expect = want[k][m].map(|(a, b)| a as f64 / b as f64);
                    assert_eq!(got[m].values[k], expect, "case {case} class {k} metric {m}");
                }
                // Dice dominates IoU when both are computed on the same sets.
                assert!(got[1].values[k].unwrap() >= got[0].values[k].unwrap());
            }
        }
    }

    #[test]
    fn report_excludes_undefined_and_writes_csv() {
        let mut b = ReportBuilder::new(&["a".into(), "b".into()]);
        // Slice 1: class a perfect, class b predicted nothing on nonempty truth.
        b.add_slice(&[1, 0, 0, 0], &[1, 0, 1, 0]).unwrap();
        // Slice 2: both empty.
        b.add_slice(&[0, 0, 0, 0], &[0, 0, 0, 0]).unwrap();
        let r = b.finish("unet", "ordered");
        assert_eq!(r.slices, 2);
        assert_eq!(r.classes[0].precision, Some(100.0));
        assert_eq!(r.classes[1].precision, None);
        assert_eq!(r.classes[1].recall, Some(0.0));
        assert_eq!(r.classes[1].dice, Some(100.0 * (1.0 / 2.0 + 1.0) / 2.0));
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "schema,model,test_order,class,Pr,Re,IoU,Dice,dice_smoothed,dice_raw,tp,fp,fn,slices,aggregation");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("eval.v1,unet,ordered,b,,0.0000,"));
        assert!(lines[3].contains(",mean,"));
    }
}
