//! Trajectory accuracy metrics (ATE, RPE), text/CSV reports and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::calibration::solve_rigid;
use crate::geometry::{read_trajectory_csv, Pose, StampedPose};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no overlapping stamps within {tol} s between estimate and ground truth")]
    NoOverlap { tol: f64 },
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Largest stamp difference accepted when associating poses (s).
    pub associate_tol: f64,
    /// Rigidly align the estimate to ground truth before computing ATE.
    pub align: bool,
    /// RPE horizon (s).
    pub rpe_delta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { associate_tol: 0.01, align: true, rpe_delta: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    pub t: f64,
    pub translation: f64,
    pub rotation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub matched: usize,
    pub ate_rmse: f64,
    pub ate_mean: f64,
    pub ate_max: f64,
    pub rotation_rmse: f64,
    pub rpe_translation: f64,
    pub rpe_rotation: f64,
    pub rpe_pairs: usize,
    /// Ground truth ← estimate transform applied before ATE (identity when alignment is off).
    pub alignment: Pose,
    pub aligned: bool,
    pub errors: Vec<PoseError>,
}

/// Nearest ground-truth index for every estimate stamp within `tol`;
/// the earlier candidate wins ties.
pub fn associate(estimate: &[StampedPose], truth: &[StampedPose], tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in estimate.iter().enumerate() {
        let k = truth.partition_point(|g| g.t < e.t);
        let mut best: Option<(f64, usize)> = None;
        for j in [k.wrapping_sub(1), k] {
            if let Some(g) = truth.get(j) {
                let d = (g.t - e.t).abs();
                if d <= tol && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        if let Some((_, j)) = best {
            out.push((i, j));
        }
    }
    out
}

fn rmse(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        (0.0, 0)
    } else {
        ((s / n as f64).sqrt(), n)
    }
}

pub fn evaluate_trajectory(estimate: &[StampedPose], truth: &[StampedPose], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let pairs = associate(estimate, truth, cfg.associate_tol);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap { tol: cfg.associate_tol });
    }
    let alignment = if cfg.align && pairs.len() >= 3 {
        let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| estimate[i].pose.translation).collect();
        let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| truth[j].pose.translation).collect();
        match solve_rigid(&src, &dst) {
            Ok(t) => t,
            // Straight-line or static motion leaves rotation about the path unobservable.
            Err(_) => Pose::from_translation(dst.iter().zip(&src).map(|(d, s)| d - s).sum::<Vector3<f64>>() / src.len() as f64),
        }
    } else {
        Pose::identity()
    };
    let errors: Vec<PoseError> = pairs
        .iter()
        .map(|&(i, j)| {
            let aligned = alignment.compose(&estimate[i].pose);
            let g = &truth[j].pose;
            PoseError {
                t: estimate[i].t,
                translation: (aligned.translation - g.translation).norm(),
                rotation: (g.rotation.transpose() * aligned.rotation).angle(),
            }
        })
        .collect();
    let (ate_rmse, n) = rmse(errors.iter().map(|e| e.translation));
    let ate_mean = errors.iter().map(|e| e.translation).sum::<f64>() / n as f64;
    let ate_max = errors.iter().map(|e| e.translation).fold(0.0, f64::max);
    let (rotation_rmse, _) = rmse(errors.iter().map(|e| e.rotation));

    // Relative pose error over the configured horizon.
    let mut rel = Vec::new();
    for (a, &(i, j)) in pairs.iter().enumerate() {
        let target = estimate[i].t + cfg.rpe_delta;
        let rest = &pairs[a + 1..];
        let k = rest.partition_point(|&(ii, _)| estimate[ii].t < target);
        let cand = [k.wrapping_sub(1), k]
            .into_iter()
            .filter_map(|c| rest.get(c))
            .filter(|&&(ii, _)| (estimate[ii].t - target).abs() <= cfg.associate_tol)
            .min_by(|x, y| (estimate[x.0].t - target).abs().total_cmp(&(estimate[y.0].t - target).abs()));
        if let Some(&(i2, j2)) = cand {
            let de = estimate[i].pose.inverse().compose(&estimate[i2].pose);
            let dg = truth[j].pose.inverse().compose(&truth[j2].pose);
            let e = dg.inverse().compose(&de);
            rel.push((e.translation.norm(), e.rotation.angle()));
        }
    }
    let (rpe_translation, rpe_pairs) = rmse(rel.iter().map(|r| r.0));
    let (rpe_rotation, _) = rmse(rel.iter().map(|r| r.1));
    Ok(EvalReport {
        matched: pairs.len(),
        ate_rmse,
        ate_mean,
        ate_max,
        rotation_rmse,
        rpe_translation,
        rpe_rotation,
        rpe_pairs,
        alignment,
        aligned: cfg.align,
        errors,
    })
}

pub fn read_trajectory_file(path: &Path) -> Result<Vec<StampedPose>, EvalError> {
    let io = |msg: String| EvalError::Io { path: path.display().to_string(), msg };
    let f = fs::File::open(path).map_err(|e| io(e.to_string()))?;
    read_trajectory_csv(BufReader::new(f)).map_err(|e| io(e.to_string()))
}

pub fn evaluate_files(
    estimate: &Path,
    truth: &Path,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<StampedPose>, Vec<StampedPose>), EvalError> {
    let est = read_trajectory_file(estimate)?;
    let gt = read_trajectory_file(truth)?;
    let report = evaluate_trajectory(&est, &gt, cfg)?;
    Ok((report, est, gt))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "matched poses      {}", self.matched);
        let _ = writeln!(s, "ATE rmse (m)       {:.6}", self.ate_rmse);
        let _ = writeln!(s, "ATE mean (m)       {:.6}", self.ate_mean);
        let _ = writeln!(s, "ATE max (m)        {:.6}", self.ate_max);
        let _ = writeln!(s, "rotation rmse (deg) {:.6}", self.rotation_rmse.to_degrees());
        let _ = writeln!(s, "RPE pairs          {}", self.rpe_pairs);
        let _ = writeln!(s, "RPE trans rmse (m) {:.6}", self.rpe_translation);
        let _ = writeln!(s, "RPE rot rmse (deg) {:.6}", self.rpe_rotation.to_degrees());
        let _ = writeln!(s, "alignment          {}", if self.aligned { "se3" } else { "none" });
        let _ = writeln!(s, "alignment pose     {}", self.alignment);
        s
    }

    pub fn errors_csv(&self) -> String {
        let mut s = String::from("t,translation_m,rotation_rad\n");
        for e in &self.errors {
            let _ = writeln!(s, "{:.9},{:.9},{:.9}", e.t, e.translation, e.rotation);
        }
        s
    }
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let mut s = format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"");
    for (x, y) in points {
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    s.push_str("\"/>\n");
    s
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    lo: (f64, f64),
    hi: (f64, f64),
}

impl Frame {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = (x - self.lo.0) / (self.hi.0 - self.lo.0).max(1e-12);
        let sy = (y - self.lo.1) / (self.hi.1 - self.lo.1).max(1e-12);
        (self.x0 + sx * self.w, self.y0 + self.h - sy * self.h)
    }

    fn axes(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{xlabel} [{:.3}, {:.3}]</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{ylabel} [{:.3}, {:.3}]</text>\n",
            self.x0,
            self.y0,
            self.w,
            self.h,
            self.x0 + self.w / 2.0,
            self.y0 - 8.0,
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 16.0,
            self.lo.0,
            self.hi.0,
            self.x0,
            self.y0 + self.h + 32.0,
            self.lo.1,
            self.hi.1,
        )
    }
}

/// Two panels: top-down (x, y) of ground truth and aligned estimate, and
/// translation error over time.
pub fn plot_svg(estimate: &[StampedPose], truth: &[StampedPose], report: &EvalReport) -> String {
    let aligned: Vec<(f64, f64)> = estimate
        .iter()
        .map(|p| {
            let q = report.alignment.compose(&p.pose).translation;
            (q.x, q.y)
        })
        .collect();
    let gt: Vec<(f64, f64)> = truth.iter().map(|p| (p.pose.translation.x, p.pose.translation.y)).collect();
    let all = aligned.iter().chain(&gt);
    let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
    for &(x, y) in all {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    // Equal aspect ratio for the map view.
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-6) * 1.05;
    let c = ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0);
    let map = Frame {
        x0: 40.0,
        y0: 40.0,
        w: 360.0,
        h: 360.0,
        lo: (c.0 - span / 2.0, c.1 - span / 2.0),
        hi: (c.0 + span / 2.0, c.1 + span / 2.0),
    };
    let t0 = report.errors.first().map_or(0.0, |e| e.t);
    let t1 = report.errors.last().map_or(1.0, |e| e.t).max(t0 + 1e-9);
    let emax = report.ate_max.max(1e-9) * 1.05;
    let err = Frame { x0: 460.0, y0: 40.0, w: 400.0, h: 360.0, lo: (t0, 0.0), hi: (t1, emax) };

    let mut s = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"900\" height=\"460\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
    );
    s.push_str(&map.axes("top-down trajectory", "x (m)", "y (m)"));
    s.push_str(&polyline(&gt.iter().map(|&(x, y)| map.map(x, y)).collect::<Vec<_>>(), "#888888"));
    s.push_str(&polyline(&aligned.iter().map(|&(x, y)| map.map(x, y)).collect::<Vec<_>>(), "#1f5fbf"));
    s.push_str(&err.axes("translation error", "t (s)", "error (m)"));
    s.push_str(&polyline(&report.errors.iter().map(|e| err.map(e.t, e.translation)).collect::<Vec<_>>(), "#c0392b"));
    let _ = writeln!(
        s,
        "<text x=\"460\" y=\"450\" font-size=\"11\">grey: ground truth, blue: estimate. ATE rmse {:.4} m, RPE {:.4} m / {:.3} deg</text>",
        report.ate_rmse,
        report.rpe_translation,
        report.rpe_rotation.to_degrees()
    );
    s.push_str("</svg>\n");
    s
}
