//! SVG rendering: trigger-accuracy curves and loss contours with projected
//! trajectories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::landscape::{LandscapeGrid, Trajectory2D};
use crate::training::Phase;

use super::metrics::MetricsRow;

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One polyline of a curve plot; `breaks` are x positions of phase changes.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub breaks: Vec<f64>,
}

fn stage_of(run_id: &str) -> &str {
    run_id.rsplit('/').next().unwrap_or(run_id)
}

/// Trigger-accuracy series. A retrain run continues the fine-tune run it
/// follows (same suffix), so each attack strength reads finetune then
/// retrain along one x axis.
pub fn curves_from_rows(rows: &[MetricsRow]) -> Vec<CurveSeries> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if r.trigger_acc.is_some() && !order.contains(&r.run_id.as_str()) {
            order.push(&r.run_id);
        }
    }
    let points_of = |id: &str| -> Vec<(f64, f64)> {
        rows.iter()
            .filter(|r| r.run_id == id)
            .filter_map(|r| r.trigger_acc.map(|a| (r.epoch as f64, a)))
            .collect()
    };
    let phase_of = |id: &str| rows.iter().find(|r| r.run_id == id).map(|r| r.phase);
    let mut series: Vec<CurveSeries> = Vec::new();
    let mut absorbed: Vec<&str> = Vec::new();
    for &id in &order {
        if absorbed.contains(&id) {
            continue;
        }
        let mut s = CurveSeries {
            label: stage_of(id).to_string(),
            points: points_of(id),
            breaks: Vec::new(),
        };
        if phase_of(id) == Some(Phase::Finetune) {
            let stage = stage_of(id);
            let prefix = &id[..id.len() - stage.len()];
            let follow = format!("{prefix}{}", stage.replacen("finetune", "retrain", 1));
            if let Some(&next) = order.iter().find(|&&o| o == follow) {
                let offset = s.points.last().map(|p| p.0).unwrap_or(0.0);
                s.breaks.push(offset);
                // the retrain epoch-0 row repeats the fine-tune endpoint
                s.points.extend(points_of(next).into_iter().skip(1).map(|(x, y)| (x + offset, y)));
                s.label = format!("{} + retrain", stage);
                absorbed.push(next);
            }
        }
        series.push(s);
    }
    series
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

pub fn curves_svg(series: &[CurveSeries], title: &str) -> String {
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    let px = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y * (H - 2.0 * PAD);
    let mut s = String::new();
    svg_open(&mut s, title);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for t in nice_ticks(0.0, 1.0, 5) {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t:.1}</text>"#, PAD - 6.0, py(t) + 4.0);
    }
    for t in nice_ticks(0.0, x_max, 5) {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t:.0}</text>"#, px(t), H - PAD + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, W / 2.0, H - 14.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">trigger accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for b in &ser.breaks {
            let _ = writeln!(
                s,
                r#"<line x1="{0}" y1="{PAD}" x2="{0}" y2="{1}" stroke="{color}" stroke-dasharray="3 3" stroke-opacity="0.5"/>"#,
                px(*b),
                H - PAD
            );
        }
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = PAD + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            W - PAD - 150.0,
            W - PAD - 130.0,
            W - PAD - 124.0,
            ly + 4.0,
            esc(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line segments of the `level` iso-contour, in grid coordinates.
pub fn marching_squares(grid: &LandscapeGrid, level: f64) -> Vec<((f64, f64), (f64, f64))> {
    let (na, nb) = (grid.alphas.len(), grid.betas.len());
    let mut segs = Vec::new();
    for i in 0..na - 1 {
        for j in 0..nb - 1 {
            // corners counter-clockwise from (i, j)
            let c = [
                (grid.alphas[i], grid.betas[j], grid.at(i, j)),
                (grid.alphas[i + 1], grid.betas[j], grid.at(i + 1, j)),
                (grid.alphas[i + 1], grid.betas[j + 1], grid.at(i + 1, j + 1)),
                (grid.alphas[i], grid.betas[j + 1], grid.at(i, j + 1)),
            ];
            let cross = |a: usize, b: usize| -> Option<(f64, f64)> {
                let (pa, pb) = (c[a], c[b]);
                if (pa.2 >= level) == (pb.2 >= level) {
                    return None;
                }
                let t = (level - pa.2) / (pb.2 - pa.2);
                Some((pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1)))
            };
            let edges: Vec<(f64, f64)> = [(0, 1), (1, 2), (2, 3), (3, 0)]
                .iter()
                .filter_map(|&(a, b)| cross(a, b))
                .collect();
            match edges.len() {
                2 => segs.push((edges[0], edges[1])),
                4 => {
                    // saddle: pair edges according to the cell-centre value
                    let centre = c.iter().map(|p| p.2).sum::<f64>() / 4.0;
                    if (centre >= level) == (c[0].2 >= level) {
                        segs.push((edges[0], edges[3]));
                        segs.push((edges[1], edges[2]));
                    } else {
                        segs.push((edges[0], edges[1]));
                        segs.push((edges[2], edges[3]));
                    }
                }
                _ => {}
            }
        }
    }
    segs
}

fn ramp(t: f64) -> String {
    // dark blue (low loss) to yellow (high loss)
    let t = t.clamp(0.0, 1.0);
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = t * (stops.len() - 1) as f64;
    let k = (x.floor() as usize).min(stops.len() - 2);
    let f = x - k as f64;
    let (a, b) = (stops[k], stops[k + 1]);
    format!(
        "rgb({:.0},{:.0},{:.0})",
        a.0 + f * (b.0 - a.0),
        a.1 + f * (b.1 - a.1),
        a.2 + f * (b.2 - a.2)
    )
}

/// Heat map, iso-contours and the projected trajectory: fine-tune points
/// dashed orange, retrain points solid blue.
pub fn contour_svg(grid: &LandscapeGrid, levels: &[f64], traj: Option<&Trajectory2D>, title: &str) -> String {
    let (a0, a1) = (grid.alphas[0], *grid.alphas.last().expect("non-empty axis"));
    let (b0, b1) = (grid.betas[0], *grid.betas.last().expect("non-empty axis"));
    let side = (W - 2.0 * PAD).min(H - 2.0 * PAD);
    let px = |a: f64| PAD + (a - a0) / (a1 - a0) * side;
    let py = |b: f64| PAD + side - (b - b0) / (b1 - b0) * side;
    let (lo, hi) = grid.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    svg_open(&mut s, title);
    let (na, nb) = (grid.alphas.len(), grid.betas.len());
    let cw = side / (na - 1) as f64;
    let ch = side / (nb - 1) as f64;
    s.push_str("<g id=\"heatmap\">\n");
    for i in 0..na {
        for j in 0..nb {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                px(grid.alphas[i]) - cw / 2.0,
                py(grid.betas[j]) - ch / 2.0,
                cw + 0.2,
                ch + 0.2,
                ramp((grid.at(i, j) - lo) / span)
            );
        }
    }
    s.push_str("</g>\n<g id=\"contours\" stroke=\"white\" stroke-width=\"0.8\" fill=\"none\">\n");
    for &level in levels {
        for ((xa, ya), (xb, yb)) in marching_squares(grid, level) {
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
                px(xa),
                py(ya),
                px(xb),
                py(yb)
            );
        }
    }
    s.push_str("</g>\n");
    if let Some(t) = traj {
        for (phase, color, dash, id) in [
            (Phase::Finetune, "#ff7f0e", r#" stroke-dasharray="5 3""#, "finetune"),
            (Phase::Retrain, "#1f77b4", "", "retrain"),
        ] {
            let pts: Vec<String> = t
                .points
                .iter()
                .filter(|p| p.phase == phase)
                .map(|p| format!("{:.2},{:.2}", px(p.alpha), py(p.beta)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<polyline id="trajectory-{id}" fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
                pts.join(" ")
            );
            if let Some(end) = t.endpoint(phase) {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}" stroke="white"/>"#,
                    px(end.alpha),
                    py(end.beta)
                );
            }
        }
    }
    let lx = PAD + side + 12.0;
    let _ = writeln!(
        s,
        r##"<text x="{lx}" y="{}">loss {lo:.3} .. {hi:.3}</text><text x="{lx}" y="{}" fill="#ff7f0e">fine-tune</text><text x="{lx}" y="{}" fill="#1f77b4">retrain</text>"##,
        PAD + 12.0,
        PAD + 30.0,
        PAD + 46.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes the curve plot (and the contour plot when a grid is given) into
/// `dir`. Empty metrics write nothing and log a warning.
pub fn render_plots(
    rows: &[MetricsRow],
    landscape: Option<(&LandscapeGrid, &[f64], &Trajectory2D)>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if rows.is_empty() {
        log::warn!("no metrics rows; skipping plots");
        return Ok(written);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let series = curves_from_rows(rows);
    let path = dir.join("trigger_acc.svg");
    std::fs::write(&path, curves_svg(&series, "trigger accuracy")).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    if let Some((grid, levels, traj)) = landscape {
        let path = dir.join("landscape.svg");
        std::fs::write(&path, contour_svg(grid, levels, Some(traj), "trigger loss"))
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::TrajectoryPoint;

    fn row(id: &str, phase: Phase, epoch: usize, acc: f64) -> MetricsRow {
        MetricsRow {
            run_id: id.into(),
            phase,
            epoch,
            lr: 1e-4,
            test_acc: None,
            trigger_acc: Some(acc),
            train_loss: None,
            trigger_loss: None,
            wall_ms: 0,
        }
    }

    #[test]
    fn retrain_continues_finetune_in_phase_order() {
        let rows = vec![
            row("r/finetune-small", Phase::Finetune, 0, 1.0),
            row("r/finetune-small", Phase::Finetune, 1, 0.5),
            row("r/retrain-small", Phase::Retrain, 0, 0.5),
            row("r/retrain-small", Phase::Retrain, 1, 0.9),
        ];
        let s = curves_from_rows(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points, vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.9)]);
        assert_eq!(s[0].breaks, vec![1.0]);
    }

    #[test]
    fn contour_of_a_plane_is_straight() {
        let grid = LandscapeGrid {
            alphas: vec![0.0, 1.0, 2.0],
            betas: vec![0.0, 1.0, 2.0],
            losses: (0..9).map(|k| (k / 3) as f64).collect(),
        };
        let segs = marching_squares(&grid, 0.5);
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|((a, _), (b, _))| (*a - 0.5).abs() < 1e-12 && (*b - 0.5).abs() < 1e-12));
    }

    #[test]
    fn one_svg_holds_both_layers() {
        let grid = LandscapeGrid {
            alphas: vec![-1.0, 0.0, 1.0],
            betas: vec![-1.0, 0.0, 1.0],
            losses: vec![2.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 2.0],
        };
        let traj = Trajectory2D {
            points: vec![
                TrajectoryPoint { epoch: 0, phase: Phase::Finetune, alpha: 0.5, beta: 0.5 },
                TrajectoryPoint { epoch: 1, phase: Phase::Retrain, alpha: 0.0, beta: 0.0 },
            ],
        };
        let svg = contour_svg(&grid, &[0.5, 1.5], Some(&traj), "t");
        assert!(svg.contains("id=\"contours\""));
        assert!(svg.contains("trajectory-finetune"));
        assert!(svg.contains("trajectory-retrain"));
    }

    #[test]
    fn empty_metrics_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = render_plots(&[], None, dir.path()).unwrap();
        assert!(out.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
