//! CSV and JSON writers for the result types. Floats carry 17
//! significant digits, lines end in `\n`, and the output depends only on
//! the data, so files from seeded runs diff cleanly.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::action::BrokenPath;
use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::generating::{CauchySolution, GeometricFront};
use crate::laxoleinik::GridFunction;
use crate::weakkam::AubryResult;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn row(out: &mut String, fields: impl IntoIterator<Item = f64>) {
    let cells: Vec<String> = fields.into_iter().map(fmt_f64).collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|k| format!("{prefix}_{k}")).collect()
}

fn header(out: &mut String, names: &[String]) {
    out.push_str(&names.join(","));
    out.push('\n');
}

/// Header `t,q_0..,p_0..,H`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let d = traj.states.first().map_or(0, |s| s.q.len());
    let mut out = String::new();
    let mut names = vec!["t".to_string()];
    names.extend(indexed("q", d));
    names.extend(indexed("p", d));
    names.push("H".into());
    header(&mut out, &names);
    for ((t, s), e) in traj.times.iter().zip(&traj.states).zip(&traj.energy) {
        row(&mut out, std::iter::once(*t).chain(s.q.iter().copied()).chain(s.p.iter().copied()).chain([*e]));
    }
    out
}

/// Header `q,p,w` (indexed per coordinate when d > 1).
pub fn front_csv(front: &GeometricFront) -> String {
    let d = front.samples.first().map_or(1, |s| s.q.len());
    let mut out = String::new();
    let mut names = if d == 1 { vec!["q".to_string(), "p".to_string()] } else { [indexed("q", d), indexed("p", d)].concat() };
    names.push("w".into());
    header(&mut out, &names);
    for s in &front.samples {
        row(&mut out, s.q.iter().chain(&s.p).copied().chain([s.w]));
    }
    out
}

/// Header `q,u,du`.
pub fn cauchy_csv(sol: &CauchySolution) -> String {
    let d = sol.queries.first().map_or(1, |q| q.len());
    let mut out = String::new();
    let names = if d == 1 {
        vec!["q".to_string(), "u".into(), "du".into()]
    } else {
        [indexed("q", d), vec!["u".into()], indexed("du", d)].concat()
    };
    header(&mut out, &names);
    for ((q, u), du) in sol.queries.iter().zip(&sol.u).zip(&sol.du) {
        row(&mut out, q.iter().copied().chain([*u]).chain(du.iter().copied()));
    }
    out
}

/// One row per interior node: `t_i,θ_i,p_minus,p_plus`.
pub fn minimizer_csv(path: &BrokenPath) -> String {
    let d = path.q0.len();
    let mut out = String::new();
    let names = if d == 1 {
        vec!["t_i".to_string(), "theta_i".into(), "p_minus".into(), "p_plus".into()]
    } else {
        [vec!["t_i".to_string()], indexed("theta", d), indexed("p_minus", d), indexed("p_plus", d)].concat()
    };
    header(&mut out, &names);
    for (i, node) in path.nodes.iter().enumerate() {
        row(
            &mut out,
            std::iter::once(path.node_time(i + 1))
                .chain(node.iter().copied())
                .chain(path.p_minus[i].iter().copied())
                .chain(path.p_plus[i].iter().copied()),
        );
    }
    out
}

#[derive(Serialize)]
struct GridHeader<'a> {
    d: usize,
    n_per_dim: usize,
    order: &'a str,
    values: &'a str,
}

/// JSON header `{d, n_per_dim}` for a grid function whose values live in
/// a companion CSV.
pub fn grid_header_json(u: &GridFunction, values_file: &str) -> String {
    let h = GridHeader { d: u.d, n_per_dim: u.n_per_dim, order: "row-major", values: values_file };
    let mut s = serde_json::to_string_pretty(&h).expect("header serializes");
    s.push('\n');
    s
}

/// Row-major value block, one node per line: `q_0..,value`.
pub fn grid_csv(u: &GridFunction) -> String {
    let mut out = String::new();
    for i in 0..u.len() {
        row(&mut out, u.node(i).into_iter().chain([u.values[i]]));
    }
    out
}

/// Marked nodes of an Aubry mask: `index,q..`.
pub fn aubry_csv(result: &AubryResult) -> String {
    let d = result.u0.d;
    let mut out = String::new();
    let mut names = vec!["index".to_string()];
    names.extend(if d == 1 { vec!["q".to_string()] } else { indexed("q", d) });
    header(&mut out, &names);
    for i in result.marked_nodes() {
        let q: Vec<String> = result.u0.node(i).into_iter().map(fmt_f64).collect();
        let _ = writeln!(out, "{i},{}", q.join(","));
    }
    out
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Writes `stem.json` (header) and `stem.csv` (values) into `dir`.
pub fn write_grid(dir: &Path, stem: &str, u: &GridFunction) -> Result<()> {
    let csv_name = format!("{stem}.csv");
    write_file(&dir.join(format!("{stem}.json")), &grid_header_json(u, &csv_name))?;
    write_file(&dir.join(csv_name), &grid_csv(u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grid_has_one_line_per_node() {
        let u = GridFunction::constant(1, 4, 0.0);
        let csv = grid_csv(&u);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cells, vec![i as f64 / 4.0, 0.0]);
        }
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, std::f64::consts::PI] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let err = write_file(Path::new("/proc/hjkam-nope/x.csv"), "x").unwrap_err();
        assert!(matches!(err, Error::Io { ref path, .. } if path.contains("hjkam-nope")));
    }
}
