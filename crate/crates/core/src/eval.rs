//! Metrics, Welch's t-test and multi-run comparison reports.
//!
//! All metrics are stored in `[0, 1]`; the markdown report formats them as
//! percentages.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objectives::ObjectiveTag;
use crate::datasets::Role;
use crate::scoring::{ScoreRow, ScorerKind};

/// Significance level for adjacent-pair comparisons.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const SIGNIFICANCE_MARKER: &str = "(**)";

/// Fraction of exact matches.
pub fn id_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(invalid(format!(
            "accuracy needs equal nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Exact AUROC with OOD as the positive class: `Pr(ood > id) + ½·Pr(tie)`.
///
/// Computed from the Mann-Whitney rank sum with midranks, kept in doubled
/// integers so the result equals pair counting bit for bit.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let (n_id, n_ood) = check_auroc_inputs(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (canonical(s), false))
        .chain(ood_scores.iter().map(|&s| (canonical(s), true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Doubled midrank of a tie group at 1-based positions lo..=hi is lo + hi.
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start;
        while end + 1 < all.len() && all[end + 1].0 == all[start].0 {
            end += 1;
        }
        let doubled_rank = (start + 1 + end + 1) as u128;
        let positives = all[start..=end].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += doubled_rank * positives;
        start = end + 1;
    }
    let m = n_ood as u128;
    let u2 = rank_sum2 - m * (m + 1);
    Ok(ratio(u2, n_id, n_ood))
}

/// Direct `O(n·m)` pair counting; the reference for [`auroc`].
pub fn auroc_pair_count(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let (n_id, n_ood) = check_auroc_inputs(id_scores, ood_scores)?;
    let mut u2: u128 = 0;
    for &o in ood_scores {
        for &i in id_scores {
            match o.partial_cmp(&i).expect("finite scores") {
                Ordering::Greater => u2 += 2,
                Ordering::Equal => u2 += 1,
                Ordering::Less => {}
            }
        }
    }
    Ok(ratio(u2, n_id, n_ood))
}

fn check_auroc_inputs(id: &[f64], ood: &[f64]) -> Result<(usize, usize)> {
    if id.is_empty() || ood.is_empty() {
        return Err(invalid("auroc needs at least one ID and one OOD score"));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(invalid("auroc scores must be finite"));
    }
    Ok((id.len(), ood.len()))
}

/// Folds −0.0 into +0.0 so sorting agrees with `==`.
fn canonical(s: f64) -> f64 {
    s + 0.0
}

fn ratio(u2: u128, n_id: usize, n_ood: usize) -> f64 {
    u2 as f64 / (2 * n_id as u128 * n_ood as u128) as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `n − 1` in the denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    pub significant: bool,
}

/// Two-sided Welch's t-test for a difference in means.
///
/// When both samples have zero variance the statistic is undefined: equal
/// means give `p = 1`, different means give `p = 0` (logged as a warning).
/// In both cases `t` is reported as 0 or ±∞ and `df` as `n_a + n_b − 2`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("welch test needs at least two values per sample"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("welch test samples must be finite"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (qa, qb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        if ma == mb {
            return Ok(WelchResult { t: 0.0, df, p: 1.0, significant: false });
        }
        log::warn!("welch test on two constant samples with different means; reporting p = 0");
        let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(WelchResult { t, df, p: 0.0, significant: true });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let p = student_t_two_sided_p(t, df)?;
    Ok(WelchResult {
        t,
        df,
        p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// `Pr(|T| ≥ |t|)` for Student's t with `df` degrees of freedom,
/// `= I_{ν/(ν+t²)}(ν/2, ½)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || t.is_nan() {
        return Err(invalid(format!("student t needs df > 0 and a number, got t={t}, df={df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let t2 = t * t;
    let x = df / (df + t2);
    let y = t2 / (df + t2);
    Ok(inc_beta_xy(0.5 * df, 0.5, x, y)?.clamp(0.0, 1.0))
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(invalid(format!("incomplete beta needs x in [0, 1], got {x}")));
    }
    inc_beta_xy(a, b, x, 1.0 - x)
}

/// `I_x(a, b)` with `y = 1 − x` supplied separately to avoid cancellation.
fn inc_beta_xy(a: f64, b: f64, x: f64, y: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(invalid(format!("incomplete beta needs a, b > 0, got {a}, {b}")));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if y <= 0.0 {
        return Ok(1.0);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(b, a, y)? / b)
    }
}

/// Modified Lentz evaluation of the continued fraction for `I_x(a, b)`.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> Result<f64> {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(crate::numerics::numerical(format!(
        "incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})"
    )))
}

/// `ln Γ(x)` for `x > 0` by the Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx).
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// ID accuracy and both AUROCs from scored rows; ID rows are those with an
/// in-distribution role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub id_accuracy: f64,
    pub near_auroc: f64,
    pub far_auroc: f64,
}

pub fn summarize_scores(rows: &[ScoreRow]) -> Result<ScoreSummary> {
    let pick = |f: fn(Role) -> bool| rows.iter().filter(move |r| f(r.role));
    let id: Vec<&ScoreRow> = pick(Role::is_id).collect();
    let near: Vec<f64> = pick(|r| r == Role::NearOod).map(|r| r.score).collect();
    let far: Vec<f64> = pick(|r| r == Role::FarOod).map(|r| r.score).collect();
    let id_scores: Vec<f64> = id.iter().map(|r| r.score).collect();
    let preds: Vec<usize> = id.iter().map(|r| r.pred).collect();
    let labels = id
        .iter()
        .map(|r| usize::try_from(r.true_label).map_err(|_| invalid("ID row with an OOD label")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSummary {
        id_accuracy: id_accuracy(&preds, &labels)?,
        near_auroc: auroc(&id_scores, &near)?,
        far_auroc: auroc(&id_scores, &far)?,
    })
}

/// Metrics for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub objective: ObjectiveTag,
    pub scorer: ScorerKind,
    pub id_accuracy: f64,
    pub near_auroc: f64,
    pub far_auroc: f64,
}

impl RunMetrics {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("id_accuracy", self.id_accuracy),
            ("near_auroc", self.near_auroc),
            ("far_auroc", self.far_auroc),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::IdAccuracy => self.id_accuracy,
            Metric::NearAuroc => self.near_auroc,
            Metric::FarAuroc => self.far_auroc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    IdAccuracy,
    NearAuroc,
    FarAuroc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::IdAccuracy, Metric::NearAuroc, Metric::FarAuroc];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::IdAccuracy => "id_accuracy",
            Metric::NearAuroc => "near_auroc",
            Metric::FarAuroc => "far_auroc",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            Metric::IdAccuracy => "ID Accuracy (%)",
            Metric::NearAuroc => "Near-OOD AUROC (%)",
            Metric::FarAuroc => "Far-OOD AUROC (%)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        MeanStd {
            mean: mean(xs),
            std: sample_std(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSummary {
    pub objective: ObjectiveTag,
    pub scorer: ScorerKind,
    pub runs: usize,
    pub id_accuracy: MeanStd,
    pub near_auroc: MeanStd,
    pub far_auroc: MeanStd,
}

impl ObjectiveSummary {
    pub fn get(&self, metric: Metric) -> MeanStd {
        match metric {
            Metric::IdAccuracy => self.id_accuracy,
            Metric::NearAuroc => self.near_auroc,
            Metric::FarAuroc => self.far_auroc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub objective: ObjectiveTag,
    pub mean: f64,
    pub std: f64,
    /// Test against the next row down; absent on the last row.
    pub vs_next: Option<WelchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: Metric,
    /// Descending by mean.
    pub rows: Vec<RankedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub summaries: Vec<ObjectiveSummary>,
    pub tables: Vec<MetricTable>,
    /// Objectives with no runs in the input.
    pub missing: Vec<ObjectiveTag>,
    pub notes: Vec<String>,
}

/// Groups runs by objective, summarises each metric and tests adjacent
/// objectives in every descending ordering.
pub fn aggregate(runs: &[RunMetrics]) -> Result<ComparisonReport> {
    let mut groups: BTreeMap<ObjectiveTag, Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        r.validate()?;
        groups.entry(r.objective).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(invalid("no runs to aggregate"));
    }
    let mut summaries = Vec::new();
    for (&objective, group) in &groups {
        if group.len() < 2 {
            return Err(invalid(format!(
                "objective {objective} has {} run; at least 2 are needed",
                group.len()
            )));
        }
        let scorer = group[0].scorer;
        if group.iter().any(|r| r.scorer != scorer) {
            return Err(invalid(format!("objective {objective} mixes scorers")));
        }
        let col = |m: Metric| MeanStd::of(&group.iter().map(|r| r.get(m)).collect::<Vec<_>>());
        summaries.push(ObjectiveSummary {
            objective,
            scorer,
            runs: group.len(),
            id_accuracy: col(Metric::IdAccuracy),
            near_auroc: col(Metric::NearAuroc),
            far_auroc: col(Metric::FarAuroc),
        });
    }

    let mut tables = Vec::new();
    for metric in Metric::ALL {
        let mut order: Vec<&ObjectiveSummary> = summaries.iter().collect();
        // Stable sort keeps objective order among equal means.
        order.sort_by(|a, b| b.get(metric).mean.total_cmp(&a.get(metric).mean));
        let samples = |tag: ObjectiveTag| groups[&tag].iter().map(|r| r.get(metric)).collect::<Vec<_>>();
        let mut rows = Vec::with_capacity(order.len());
        for (i, s) in order.iter().enumerate() {
            let vs_next = match order.get(i + 1) {
                Some(next) => Some(welch_t_test(&samples(s.objective), &samples(next.objective))?),
                None => None,
            };
            let ms = s.get(metric);
            rows.push(RankedRow {
                objective: s.objective,
                mean: ms.mean,
                std: ms.std,
                vs_next,
            });
        }
        tables.push(MetricTable { metric, rows });
    }

    let missing: Vec<ObjectiveTag> = ObjectiveTag::ALL
        .into_iter()
        .filter(|t| !groups.contains_key(t))
        .collect();
    let notes = missing
        .iter()
        .map(|t| format!("{} has no runs and is absent from every table.", t.display_name()))
        .collect();
    Ok(ComparisonReport {
        summaries,
        tables,
        missing,
        notes,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn pct_pm(ms: MeanStd) -> String {
    format!("{}±{}", pct(ms.mean), pct(ms.std))
}

impl ComparisonReport {
    /// Markdown: an overview table (best in bold, second underlined), then
    /// one ranked table per metric with adjacent-pair Welch tests.
    pub fn to_markdown(&self, title: &str) -> String {
        let mut md = String::new();
        let runs: Vec<String> = self.summaries.iter().map(|s| s.runs.to_string()).collect();
        let _ = writeln!(md, "# {title}\n");
        let _ = writeln!(
            md,
            "Mean ± sample standard deviation over runs ({} per objective), in percent. \
             Adjacent rows of each ranked table are compared with a two-sided Welch's t-test; \
             pairs with p < {SIGNIFICANCE_LEVEL} are marked {SIGNIFICANCE_MARKER}.\n",
            runs.join("/")
        );
        let _ = writeln!(
            md,
            "| Loss Function | {} | {} | {} | Scorer |",
            Metric::IdAccuracy.heading(),
            Metric::NearAuroc.heading(),
            Metric::FarAuroc.heading()
        );
        let _ = writeln!(md, "|---|---|---|---|---|");
        for s in &self.summaries {
            let cells: Vec<String> = Metric::ALL
                .iter()
                .map(|&m| {
                    let text = pct_pm(s.get(m));
                    match self.table(m).rows.iter().position(|r| r.objective == s.objective) {
                        Some(0) => format!("**{text}**"),
                        Some(1) => format!("<u>{text}</u>"),
                        _ => text,
                    }
                })
                .collect();
            let _ = writeln!(
                md,
                "| {} | {} | {} |",
                s.objective.display_name(),
                cells.join(" | "),
                s.scorer.as_str()
            );
        }
        for table in &self.tables {
            let _ = writeln!(md, "\n## {}\n", table.metric.heading());
            let _ = writeln!(md, "| Rank | Loss Function | Mean±Std | t vs next | p vs next | |");
            let _ = writeln!(md, "|---|---|---|---|---|---|");
            for (i, row) in table.rows.iter().enumerate() {
                let (t, p, mark) = match row.vs_next {
                    Some(w) => (
                        format!("{:.3}", w.t),
                        format!("{:.4}", w.p),
                        if w.significant { SIGNIFICANCE_MARKER } else { "" },
                    ),
                    None => (String::new(), String::new(), ""),
                };
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {t} | {p} | {mark} |",
                    i + 1,
                    row.objective.display_name(),
                    pct_pm(MeanStd { mean: row.mean, std: row.std })
                );
            }
        }
        if !self.notes.is_empty() {
            let _ = writeln!(md, "\n## Notes\n");
            for n in &self.notes {
                let _ = writeln!(md, "- {n}");
            }
        }
        md
    }

    pub fn table(&self, metric: Metric) -> &MetricTable {
        self.tables
            .iter()
            .find(|t| t.metric == metric)
            .expect("aggregate builds every metric table")
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

pub fn write_runs_json(path: &Path, runs: &[RunMetrics]) -> Result<()> {
    let text = serde_json::to_string_pretty(runs).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_runs_json(path: &Path) -> Result<Vec<RunMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let runs: Vec<RunMetrics> = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    for r in &runs {
        r.validate()?;
    }
    Ok(runs)
}

pub fn write_runs_csv(path: &Path, runs: &[RunMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["run", "seed", "objective", "scorer", "id_accuracy", "near_auroc", "far_auroc"])
        .map_err(|e| csv_err(path, e))?;
    for r in runs {
        w.write_record([
            r.run.to_string(),
            r.seed.to_string(),
            r.objective.as_str().to_string(),
            r.scorer.as_str().to_string(),
            format!("{:?}", r.id_accuracy),
            format!("{:?}", r.near_auroc),
            format!("{:?}", r.far_auroc),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}
