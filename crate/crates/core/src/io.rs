//! CSV input and output. Column orders are fixed and documented in
//! `docs/formats.md`. Floats are written in Rust's shortest round-trip form,
//! so a written panel reloads bit for bit.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::clustering::{Centers, GroupAssignment};
use crate::error::{Error, Result};
use crate::estimators::{CvReport, FitResult};
use crate::hettest::{GroupTest, TestKind, TestResult};
use crate::panel::PanelData;
use crate::selection::{GapResult, IndexScores};

/// Integer-looking labels sort numerically, everything else lexically.
fn label_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn sorted_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = labels.map(str::to_string).collect();
    v.sort_by(|a, b| label_cmp(a, b));
    v.dedup();
    v
}

/// Reads a balanced long-format panel with header `unit,time,y,x1,...,xp`.
/// Extra columns are ignored; rows may come in any order.
pub fn read_panel<R: Read>(reader: R) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("missing column `{name}`")));
    let (ui, ti, yi) = (find("unit")?, find("time")?, find("y")?);
    let mut xcols = vec![find("x1")?];
    while let Some(pos) = headers.iter().position(|h| h == format!("x{}", xcols.len() + 1)) {
        xcols.push(pos);
    }
    let p = xcols.len();

    let mut rows: Vec<(String, String, f64, Vec<f64>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).ok_or_else(|| Error::Data(format!("row {}: too few fields", line + 2)));
        let num = |c: usize| -> Result<f64> {
            let s = field(c)?;
            let v: f64 = s.parse().map_err(|_| Error::Data(format!("row {}: `{s}` in column `{}` is not a number", line + 2, &headers[c])))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {}: non-finite value in column `{}`", line + 2, &headers[c])));
            }
            Ok(v)
        };
        let xs = xcols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        rows.push((field(ui)?.to_string(), field(ti)?.to_string(), num(yi)?, xs));
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let units = sorted_labels(rows.iter().map(|r| r.0.as_str()));
    let times = sorted_labels(rows.iter().map(|r| r.1.as_str()));
    let (n, t_len) = (units.len(), times.len());
    if rows.len() != n * t_len {
        return Err(Error::Data(format!("unbalanced panel: {} rows for {n} units and {t_len} periods", rows.len())));
    }
    let unit_pos: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let time_pos: HashMap<&str, usize> = times.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut y = vec![f64::NAN; n * t_len];
    let mut x = vec![0.0; n * t_len * p];
    let mut seen = vec![false; n * t_len];
    for (u, t, yv, xs) in &rows {
        let idx = unit_pos[u.as_str()] * t_len + time_pos[t.as_str()];
        if seen[idx] {
            return Err(Error::Data(format!("duplicate observation for unit `{u}` at time `{t}`")));
        }
        seen[idx] = true;
        y[idx] = *yv;
        x[idx * p..(idx + 1) * p].copy_from_slice(xs);
    }
    PanelData::with_labels(n, t_len, p, y, x, units, times)
}

pub fn read_panel_file(path: &Path) -> Result<PanelData> {
    read_panel(std::fs::File::open(path)?)
}

pub fn write_panel<W: Write>(data: &PanelData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = data.n_covariates();
    let mut header = vec!["unit".to_string(), "time".to_string(), "y".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..data.n_units() {
        for t in 0..data.n_periods() {
            let mut rec = vec![data.unit_labels()[i].clone(), data.time_labels()[t].clone(), data.y_at(i, t).to_string()];
            rec.extend((0..p).map(|j| data.x_at(i, t, j).to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel_file(data: &PanelData, path: &Path) -> Result<()> {
    write_panel(data, std::fs::File::create(path)?)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn indexed_header(first: &str, prefix: &str, p: usize) -> Vec<String> {
    std::iter::once(first.to_string()).chain((1..=p).map(|j| format!("{prefix}{j}"))).collect()
}

/// `beta.csv`, `centers.csv`, `assignment.csv` and `summary.txt` (plus
/// `pre_snap_beta.csv` when the fit snapped its slopes).
pub fn write_fit(fit: &FitResult, data: &PanelData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = fit.beta.n_covariates();
    let labels = data.unit_labels();
    let write_beta = |name: &str, beta: &nalgebra::DMatrix<f64>| -> Result<()> {
        let mut w = writer(&dir.join(name))?;
        w.write_record(indexed_header("unit", "beta", p))?;
        for i in 0..beta.nrows() {
            let mut rec = vec![labels[i].clone()];
            rec.extend((0..p).map(|j| beta[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    };
    write_beta("beta.csv", &fit.beta.beta)?;
    if fit.tag() == crate::panel::EstimatorTag::Classo {
        if let Some(pre) = &fit.pre_snap_beta {
            write_beta("pre_snap_beta.csv", &pre.beta)?;
        }
    }

    let mut w = writer(&dir.join("centers.csv"))?;
    w.write_record(indexed_header("group", "alpha", p))?;
    for k in 0..fit.centers.k() {
        let mut rec = vec![(k + 1).to_string()];
        rec.extend((0..p).map(|j| fit.centers.alpha[(k, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = writer(&dir.join("assignment.csv"))?;
    w.write_record(["unit", "group"])?;
    for (i, g) in fit.assignment.group_of.iter().enumerate() {
        w.write_record([labels[i].as_str(), &(g + 1).to_string()])?;
    }
    w.flush()?;

    std::fs::write(dir.join("summary.txt"), fit_summary(fit))?;
    Ok(())
}

/// `key = value` lines describing a fit.
pub fn fit_summary(fit: &FitResult) -> String {
    let last = fit.objective_trace.last().copied().unwrap_or(f64::NAN);
    format!(
        "estimator = {}\nk = {}\nlambda = {}\niterations = {}\nconverged = {}\nobjective = {}\ngroup_sizes = {}\n",
        fit.tag(),
        fit.centers.k(),
        fit.lambda,
        fit.iterations,
        fit.converged,
        last,
        fit.assignment.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
    )
}

/// `lambda,mean_loss,fold1..foldF`.
pub fn write_cv(cv: &CvReport, path: &Path) -> Result<()> {
    let folds = cv.fold_losses.ncols();
    let mut w = writer(path)?;
    let mut header = vec!["lambda".to_string(), "mean_loss".to_string(), "selected".to_string()];
    header.extend((1..=folds).map(|f| format!("fold{f}")));
    w.write_record(&header)?;
    for (g, (&lambda, mean)) in cv.grid.iter().zip(cv.mean_losses()).enumerate() {
        let mut rec = vec![lambda.to_string(), mean.to_string(), u8::from(lambda == cv.selected_lambda).to_string()];
        rec.extend((0..folds).map(|f| cv.fold_losses[(g, f)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub const TEST_HEADER: [&str; 9] = ["scope", "test", "statistic", "df", "p_value", "stars", "n_used", "status", "note"];

fn test_record(r: &TestResult) -> Vec<String> {
    vec![
        r.scope.to_string(),
        r.kind.label().to_string(),
        r.statistic.to_string(),
        r.df.to_string(),
        r.p_value.to_string(),
        r.stars().to_string(),
        r.n_used.to_string(),
        "tested".to_string(),
        String::new(),
    ]
}

/// The results of one test kind: the cross-sectional test plus per-group tests.
#[derive(Debug, Clone, Copy)]
pub struct TestSection<'a> {
    pub kind: TestKind,
    pub cross: &'a [TestResult],
    pub groups: &'a [GroupTest],
}

/// One row per test; skipped groups keep their row with empty statistics.
pub fn write_tests(sections: &[TestSection<'_>], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TEST_HEADER)?;
    for sec in sections {
        for r in sec.cross {
            w.write_record(test_record(r))?;
        }
        for g in sec.groups {
            match g {
                GroupTest::Tested(r) => w.write_record(test_record(r))?,
                GroupTest::Skipped { group, size, reason } => w.write_record([
                    format!("group({})", group + 1),
                    sec.kind.label().to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    size.to_string(),
                    "skipped".to_string(),
                    reason.clone(),
                ])?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `k,log_w,ref_log_w_mean,s_k,gap,selected`.
pub fn write_gap(g: &GapResult, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["k", "log_w", "ref_log_w_mean", "s_k", "gap", "selected"])?;
    for i in 0..g.k_grid.len() {
        w.write_record([
            g.k_grid[i].to_string(),
            g.log_w[i].to_string(),
            g.ref_log_w_mean[i].to_string(),
            g.s_k[i].to_string(),
            g.gap[i].to_string(),
            u8::from(g.k_grid[i] == g.selected_k).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `centers.csv` as written by [`write_fit`].
pub fn read_centers(path: &Path) -> Result<Centers> {
    let mut r = csv::Reader::from_path(path)?;
    let p = r.headers()?.len().saturating_sub(1);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = (1..=p)
            .map(|j| rec.get(j).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| Error::Data(format!("bad center value in row {}", rows.len() + 1))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() || p == 0 {
        return Err(Error::Data("centers file has no groups".into()));
    }
    Ok(Centers::new(nalgebra::DMatrix::from_fn(rows.len(), p, |k, j| rows[k][j])))
}

/// Reads `assignment.csv` (1-based groups) and orders it by the panel's units.
pub fn read_assignment(path: &Path, data: &PanelData, k: usize) -> Result<GroupAssignment> {
    let mut r = csv::Reader::from_path(path)?;
    let mut by_label = HashMap::new();
    for rec in r.records() {
        let rec = rec?;
        let unit = rec.get(0).unwrap_or("").trim().to_string();
        let group = rec
            .get(1)
            .and_then(|g| g.trim().parse::<usize>().ok())
            .filter(|&g| (1..=k).contains(&g))
            .ok_or_else(|| Error::Data(format!("bad group for unit `{unit}`")))?;
        by_label.insert(unit, group - 1);
    }
    let group_of = data
        .unit_labels()
        .iter()
        .map(|l| by_label.get(l).copied().ok_or_else(|| Error::Data(format!("unit `{l}` missing from assignment"))))
        .collect::<Result<Vec<usize>>>()?;
    Ok(GroupAssignment::from_labels(group_of, k))
}

/// `k,method,score,selected`.
pub fn write_index_scores(s: &IndexScores, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["k", "method", "score", "selected"])?;
    for (k, score) in s.k_grid.iter().zip(&s.scores) {
        w.write_record([k.to_string(), s.method.label().to_string(), score.to_string(), u8::from(*k == s.selected_k).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_shuffled_rows_and_sorts_numerically() {
        let text = "time,unit,y,x1,extra\n2,10,4.0,2.0,z\n1,2,1.0,0.5,z\n2,2,2.0,1.0,z\n1,10,3.0,1.5,z\n";
        let d = read_panel(text.as_bytes()).unwrap();
        assert_eq!(d.unit_labels(), ["2", "10"]);
        assert_eq!(d.y(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.x(), [0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn reports_problems_by_name() {
        let missing = "unit,time,y,x2\n1,1,0,0\n";
        let e = read_panel(missing.as_bytes()).unwrap_err().to_string();
        assert!(e.contains("x1"), "{e}");
        let unbalanced = "unit,time,y,x1\n1,1,0,0\n1,2,0,0\n2,1,0,0\n";
        assert!(read_panel(unbalanced.as_bytes()).unwrap_err().to_string().contains("unbalanced"));
        let dup = "unit,time,y,x1\n1,1,0,0\n1,1,0,0\n2,1,0,0\n2,2,0,0\n";
        assert!(matches!(read_panel(dup.as_bytes()), Err(Error::Data(_))));
        let bad = "unit,time,y,x1\n1,1,abc,0\n";
        assert!(read_panel(bad.as_bytes()).unwrap_err().to_string().contains("`y`"));
    }
}
