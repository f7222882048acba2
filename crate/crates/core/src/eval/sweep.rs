use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{CalipHyper, ForwardOptions, LogitTerms};
use crate::error::{CalipError, Result};
use crate::parametric::{check_params, ProjectionMask, ProjectionParams};
use crate::store::FeatureBundle;

use super::{fewshot_logits, tally, zeroshot_logits, LogitTable};

/// Exhaustive hyperparameter grid. `beta1` stays fixed at 1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepGrid {
    pub beta2: Vec<f32>,
    pub beta3: Vec<f32>,
    pub alpha_t: Vec<f32>,
    pub alpha_s: Vec<f32>,
}

impl Default for SweepGrid {
    /// The single default operating point.
    fn default() -> Self {
        let h = CalipHyper::default();
        SweepGrid {
            beta2: vec![h.beta2],
            beta3: vec![h.beta3],
            alpha_t: vec![h.alpha_t],
            alpha_s: vec![h.alpha_s],
        }
    }
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.beta2.len() * self.beta3.len() * self.alpha_t.len() * self.alpha_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in self.axes() {
            if values.is_empty() {
                return Err(CalipError::param(name, "grid axis has no values"));
            }
        }
        for h in self.points() {
            h.validate()?;
        }
        Ok(())
    }

    fn axes(&self) -> [(&'static str, &[f32]); 4] {
        [
            ("beta2", &self.beta2),
            ("beta3", &self.beta3),
            ("alpha_t", &self.alpha_t),
            ("alpha_s", &self.alpha_s),
        ]
    }

    /// Grid points in table order: `beta2` outermost, `alpha_s` innermost.
    pub fn points(&self) -> Vec<CalipHyper> {
        let mut out = Vec::with_capacity(self.len());
        for &beta2 in &self.beta2 {
            for &beta3 in &self.beta3 {
                for &alpha_t in &self.alpha_t {
                    for &alpha_s in &self.alpha_s {
                        out.push(CalipHyper {
                            alpha_t,
                            alpha_s,
                            beta1: 1.0,
                            beta2,
                            beta3,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Parses a grid SPEC such as `beta2=0.08:0.02:0.18,beta3=0.1|0.2,alpha_t=2`.
///
/// Each entry is `name=VALUES` where `VALUES` is a single number, an
/// inclusive `start:step:end` range, or a `|`-separated list. Axes that are
/// not mentioned keep their default single value. Errors report the
/// 1-based character column of the offending token.
pub fn parse_grid_spec(spec: &str) -> Result<SweepGrid> {
    let fail = |col: usize, msg: String| CalipError::param("grid", format!("column {}: {msg}", col + 1));
    let mut grid = SweepGrid::default();
    let mut seen = [false; 4];
    if spec.trim().is_empty() {
        return Err(fail(0, "empty grid spec".into()));
    }
    let mut offset = 0;
    for entry in spec.split(',') {
        let start = offset;
        offset += entry.len() + 1;
        let Some(eq) = entry.find('=') else {
            return Err(fail(start, format!("expected NAME=VALUES, got {entry:?}")));
        };
        let name = entry[..eq].trim();
        let slot = match name {
            "beta2" => 0,
            "beta3" => 1,
            "alpha_t" | "alpha-t" => 2,
            "alpha_s" | "alpha-s" => 3,
            _ => {
                return Err(fail(
                    start,
                    format!("unknown parameter {name:?} (expected beta2, beta3, alpha_t, alpha_s)"),
                ))
            }
        };
        if std::mem::replace(&mut seen[slot], true) {
            return Err(fail(start, format!("parameter {name:?} given twice")));
        }
        let axis = match slot {
            0 => &mut grid.beta2,
            1 => &mut grid.beta3,
            2 => &mut grid.alpha_t,
            _ => &mut grid.alpha_s,
        };
        *axis = parse_values(&entry[eq + 1..], start + eq + 1).map_err(|(col, msg)| fail(col, msg))?;
    }
    grid.validate()?;
    Ok(grid)
}

fn parse_values(text: &str, base: usize) -> std::result::Result<Vec<f32>, (usize, String)> {
    let number = |s: &str, col: usize| -> std::result::Result<f64, (usize, String)> {
        let t = s.trim();
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err((col, format!("not a number: {t:?}"))),
        }
    };
    if text.trim().is_empty() {
        return Err((base, "missing values".into()));
    }
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err((base, format!("range must be start:step:end, got {text:?}")));
        }
        let col1 = base + parts[0].len() + 1;
        let col2 = col1 + parts[1].len() + 1;
        let (start, step, end) = (number(parts[0], base)?, number(parts[1], col1)?, number(parts[2], col2)?);
        if step <= 0.0 {
            return Err((col1, format!("range step must be > 0, got {step}")));
        }
        if end < start {
            return Err((col2, format!("range end {end} is below start {start}")));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        if count > 10_000 {
            return Err((col1, format!("range expands to {count} values (limit 10000)")));
        }
        return Ok((0..count).map(|i| (start + i as f64 * step) as f32).collect());
    }
    let mut col = base;
    let mut out = Vec::new();
    for item in text.split('|') {
        out.push(number(item, col)? as f32);
        col += item.len() + 1;
    }
    Ok(out)
}

/// What the swept fusion weights are applied to.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum SweepMode {
    ZeroShot,
    /// Fixed trained projections; only the fusion weights vary.
    FewShot {
        params: ProjectionParams,
        mask: ProjectionMask,
    },
}

impl SweepMode {
    pub fn name(&self) -> &'static str {
        match self {
            SweepMode::ZeroShot => "zeroshot",
            SweepMode::FewShot { .. } => "fewshot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub hyper: CalipHyper,
    pub accuracy: f64,
    pub n_correct: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub mode: &'static str,
    pub best: SweepRow,
    /// Every grid point, in grid order.
    pub rows: Vec<SweepRow>,
    pub n_total: usize,
    pub wall_time_ms: f64,
}

impl SweepResult {
    /// Tab-separated table with a header line.
    pub fn to_table(&self) -> String {
        let mut s = String::from("beta2\tbeta3\talpha_t\talpha_s\taccuracy\tn_correct\tn_total\n");
        for r in &self.rows {
            let h = r.hyper;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}",
                h.beta2, h.beta3, h.alpha_t, h.alpha_s, r.accuracy, r.n_correct, self.n_total
            );
        }
        s
    }
}

fn key(h: &CalipHyper) -> [f32; 4] {
    [h.beta2, h.beta3, h.alpha_t, h.alpha_s]
}

/// True when `a` should replace the current best `b`.
fn better(a: &SweepRow, b: &SweepRow) -> bool {
    if a.n_correct != b.n_correct {
        return a.n_correct > b.n_correct;
    }
    let (ka, kb) = (key(&a.hyper), key(&b.hyper));
    ka.iter()
        .zip(&kb)
        .find(|(x, y)| x != y)
        .is_some_and(|(x, y)| x < y)
}

/// Evaluates every grid point on `bundle` and returns the most accurate.
///
/// Per-image logit terms are computed once per distinct `(alpha_t, alpha_s)`
/// pair and re-fused for each `beta`, through the same scoring path as
/// [`evaluate_zeroshot`](super::evaluate_zeroshot). Ties go to the
/// lexicographically smallest `(beta2, beta3, alpha_t, alpha_s)`.
pub fn sweep(bundle: &FeatureBundle, grid: &SweepGrid, mode: &SweepMode) -> Result<SweepResult> {
    let start = Instant::now();
    grid.validate()?;
    if bundle.is_empty() {
        return Err(CalipError::Protocol("bundle has no images to evaluate".into()));
    }
    if let SweepMode::FewShot { params, .. } = mode {
        check_params(params, bundle.text())?;
    }
    let terms = LogitTerms::default();
    let mut rows = Vec::with_capacity(grid.len());
    let mut cache: Vec<((f32, f32), LogitTable)> = Vec::new();
    for &alpha_t in &grid.alpha_t {
        for &alpha_s in &grid.alpha_s {
            if cache.iter().any(|(k, _)| *k == (alpha_t, alpha_s)) {
                continue;
            }
            let hyper = CalipHyper {
                alpha_t,
                alpha_s,
                ..CalipHyper::default()
            };
            let table = match mode {
                SweepMode::ZeroShot => zeroshot_logits(bundle, &hyper)?,
                SweepMode::FewShot { params, mask } => {
                    fewshot_logits(bundle, params, &hyper, *mask, ForwardOptions::default())?
                }
            };
            cache.push(((alpha_t, alpha_s), table));
        }
    }
    let points = grid.points();
    let n = bundle.len();
    points
        .par_iter()
        .map(|h| {
            let table = &cache
                .iter()
                .find(|(k, _)| *k == (h.alpha_t, h.alpha_s))
                .expect("cached")
                .1;
            let t = tally(bundle, table, h, &terms);
            SweepRow {
                hyper: *h,
                accuracy: t.accuracy(n),
                n_correct: t.n_correct,
            }
        })
        .collect_into_vec(&mut rows);
    let mut best = rows[0];
    for r in &rows[1..] {
        if better(r, &best) {
            best = *r;
        }
    }
    Ok(SweepResult {
        mode: mode.name(),
        best,
        rows,
        n_total: n,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate_zeroshot;
    use crate::synth;

    #[test]
    fn range_spec_expands_inclusively() {
        let g = parse_grid_spec("beta2=0.08:0.02:0.18").unwrap();
        assert_eq!(g.beta2, vec![0.08, 0.1, 0.12, 0.14, 0.16, 0.18]);
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn list_and_single_specs() {
        let g = parse_grid_spec("beta2=1|2,beta3=0.5,alpha_t=1|4,alpha-s=3").unwrap();
        assert_eq!(g.beta2, vec![1.0, 2.0]);
        assert_eq!(g.beta3, vec![0.5]);
        assert_eq!(g.alpha_t, vec![1.0, 4.0]);
        assert_eq!(g.alpha_s, vec![3.0]);
        assert_eq!(g.points().len(), 4);
        assert_eq!(g.points()[1].alpha_t, 4.0);
    }

    #[test]
    fn malformed_specs_report_column() {
        let cases = [
            ("beta2=0.1:x:0.3", "column 11"),
            ("beta2=1,gamma=2", "column 9"),
            ("beta2", "column 1"),
            ("beta2=1|oops", "column 9"),
            ("beta2=0.3:0.1:0.1", "column 15"),
            ("", "column 1"),
        ];
        for (spec, col) in cases {
            let err = parse_grid_spec(spec).unwrap_err().to_string();
            assert!(err.contains(col), "{spec:?}: {err}");
        }
        assert!(parse_grid_spec("beta2=-1").is_err());
        assert!(parse_grid_spec("beta2=1,beta2=2").is_err());
    }

    #[test]
    fn singleton_grid_returns_its_point() {
        let b = synth::random_bundle(4, 3, 8, 12, 2, 2);
        let g = parse_grid_spec("beta2=0.7,beta3=0.2,alpha_t=1.5,alpha_s=3").unwrap();
        let r = sweep(&b, &g, &SweepMode::ZeroShot).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(key(&r.best.hyper), [0.7, 0.2, 1.5, 3.0]);
    }

    #[test]
    fn best_matches_direct_evaluation() {
        let b = synth::random_bundle(5, 4, 8, 40, 2, 2);
        let g = parse_grid_spec("beta2=0:0.5:2,beta3=0|0.3,alpha_t=1|2,alpha_s=2|4").unwrap();
        let r = sweep(&b, &g, &SweepMode::ZeroShot).unwrap();
        assert_eq!(r.rows.len(), 5 * 2 * 2 * 2);
        for row in r.rows.iter().step_by(7) {
            let e = evaluate_zeroshot(&b, &row.hyper, &LogitTerms::default()).unwrap();
            assert_eq!(e.accuracy, row.accuracy);
        }
        let e = evaluate_zeroshot(&b, &r.best.hyper, &LogitTerms::default()).unwrap();
        assert_eq!(e.accuracy, r.best.accuracy);
        assert!(r.rows.iter().all(|x| x.n_correct <= r.best.n_correct));
    }

    #[test]
    fn ties_prefer_smaller_key() {
        let h = CalipHyper::default();
        let row = |b2, b3| SweepRow {
            hyper: h.with_betas(1.0, b2, b3),
            accuracy: 50.0,
            n_correct: 5,
        };
        assert!(better(&row(0.1, 0.9), &row(0.2, 0.0)));
        assert!(!better(&row(0.2, 0.0), &row(0.1, 0.9)));
        assert!(better(&row(0.2, 0.0), &row(0.2, 0.1)));
    }

    #[test]
    fn table_has_header_and_rows() {
        let b = synth::random_bundle(5, 4, 8, 10, 1, 2);
        let g = parse_grid_spec("beta2=0.08:0.02:0.18").unwrap();
        let t = sweep(&b, &g, &SweepMode::ZeroShot).unwrap().to_table();
        assert_eq!(t.lines().count(), 7);
        assert!(t.starts_with("beta2\t"));
    }
}
