//! Standalone SVG phase plots for planar closed loops.

use std::fmt::Write as _;
use std::path::Path;

use koopstab::lifting::Dictionary;
use koopstab::linalg::{pd_inverse, SymMatrix};
use koopstab::plant::{ControlAffinePlant, Trajectory};
use koopstab::synthesis::{controller_from, ControllerCert};
use koopstab::verify::lyapunov_value;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("phase plots need a 2-D state, the plant has {0}")]
    Unsupported(usize),
    #[error("P is not positive definite: {0}")]
    Certificate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const SIZE: f64 = 640.0;
const PAD: f64 = 56.0;
const QUIVER: usize = 17;
const CONTOUR: usize = 160;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Square view `[-half, half]²` and the radius of the origin marker, both
/// in state units.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub half: f64,
    pub origin_radius: f64,
}

struct Frame {
    half: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x + self.half) / (2.0 * self.half) * (SIZE - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        SIZE - PAD - (y + self.half) / (2.0 * self.half) * (SIZE - 2.0 * PAD)
    }

    fn scale(&self) -> f64 {
        (SIZE - 2.0 * PAD) / (2.0 * self.half)
    }
}

/// Renders trajectories, the closed-loop vector field, initial-point
/// markers and the level set `Ψ(x)ᵀP⁻¹Ψ(x) = c`.
pub fn phase_plot_svg(
    trajs: &[Trajectory<f64>],
    cert: &ControllerCert<f64>,
    plant: &ControlAffinePlant<f64>,
    dict: &Dictionary<f64>,
    view: View,
) -> Result<String, PlotError> {
    if plant.n != 2 {
        return Err(PlotError::Unsupported(plant.n));
    }
    let f = Frame { half: view.half };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    axes(&mut s, &f);
    quiver(&mut s, &f, cert, plant, dict);
    let p_inv = pd_inverse(&SymMatrix::symmetrize(cert.p.clone()))
        .map_err(|e| PlotError::Certificate(e.to_string()))?;
    let v = |x: f64, y: f64| {
        lyapunov_value(&DVector::from_vec(vec![x, y]), p_inv.as_matrix(), dict) - cert.c
    };
    let segs = contour(&f, v);
    if !segs.is_empty() {
        let _ = writeln!(
            s,
            r##"<path d="{segs}" stroke="#444" stroke-width="1.6" stroke-dasharray="6 4" fill="none"/>"##
        );
    }
    for (i, t) in trajs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for (k, x) in t.states.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.2} {:.2} ",
                if k == 0 { "M" } else { "L" },
                f.px(x[0]),
                f.py(x[1])
            );
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" stroke="{color}" stroke-width="1.4" fill="none"/>"#,
            d.trim_end()
        );
        let x0 = &t.states[0];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}" stroke="black" stroke-width="0.8"/>"#,
            f.px(x0[0]),
            f.py(x0[1])
        );
    }
    let r = (view.origin_radius * f.scale()).max(3.0);
    let _ = writeln!(
        s,
        r#"<circle cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="none" stroke="black" stroke-width="1.2"/>"#,
        f.px(0.0),
        f.py(0.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">closed loop, K = [{}]</text>"#,
        SIZE / 2.0,
        cert.k
            .iter()
            .map(|k| format!("{k:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_phase_plot(
    path: &Path,
    trajs: &[Trajectory<f64>],
    cert: &ControllerCert<f64>,
    plant: &ControlAffinePlant<f64>,
    dict: &Dictionary<f64>,
    view: View,
) -> Result<(), PlotError> {
    let svg = phase_plot_svg(trajs, cert, plant, dict, view)?;
    std::fs::write(path, svg)?;
    Ok(())
}

fn axes(s: &mut String, f: &Frame) {
    let (lo, hi) = (f.px(-f.half), f.px(f.half));
    let _ = writeln!(
        s,
        r##"<rect x="{lo:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#222"/>"##,
        f.py(f.half),
        hi - lo,
        hi - lo
    );
    for i in 0..=4 {
        let v = -f.half + f.half * 0.5 * i as f64;
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{lo:.2}" x2="{x:.2}" y2="{hi:.2}" stroke="#e4e4e4"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"##,
            SIZE - PAD + 18.0,
            x = f.px(v),
            lo = f.py(-f.half),
            hi = f.py(f.half),
        );
        let _ = writeln!(
            s,
            r##"<line x1="{lo:.2}" y1="{y:.2}" x2="{hi:.2}" y2="{y:.2}" stroke="#e4e4e4"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            PAD - 6.0,
            f.py(v) + 4.0,
            y = f.py(v),
            lo = f.px(-f.half),
            hi = f.px(f.half),
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">x1</text>"#,
        SIZE / 2.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">x2</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
}

fn quiver(
    s: &mut String,
    f: &Frame,
    cert: &ControllerCert<f64>,
    plant: &ControlAffinePlant<f64>,
    dict: &Dictionary<f64>,
) {
    let ctrl = controller_from(cert, dict);
    let zero = DVector::zeros(2);
    let step = 2.0 * f.half / QUIVER as f64;
    let len = 0.42 * step * f.scale();
    let mut d = String::new();
    for i in 0..QUIVER {
        for j in 0..QUIVER {
            let x = DVector::from_vec(vec![
                -f.half + (i as f64 + 0.5) * step,
                -f.half + (j as f64 + 0.5) * step,
            ]);
            let v = plant.rhs(&x, &ctrl(&x), &zero);
            let norm = v.norm();
            if !norm.is_finite() || norm == 0.0 {
                continue;
            }
            let (ux, uy) = (v[0] / norm, -v[1] / norm);
            let (x0, y0) = (f.px(x[0]) - 0.5 * len * ux, f.py(x[1]) - 0.5 * len * uy);
            let (x1, y1) = (x0 + len * ux, y0 + len * uy);
            let head = 0.3 * len;
            let (ax, ay) = (x1 - head * (ux - 0.5 * uy), y1 - head * (uy + 0.5 * ux));
            let (bx, by) = (x1 - head * (ux + 0.5 * uy), y1 - head * (uy - 0.5 * ux));
            let _ = write!(
                d,
                "M{x0:.2} {y0:.2} L{x1:.2} {y1:.2} M{ax:.2} {ay:.2} L{x1:.2} {y1:.2} L{bx:.2} {by:.2} "
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<path d="{}" stroke="#9a9a9a" stroke-width="0.9" fill="none"/>"##,
        d.trim_end()
    );
}

/// Marching squares for the zero set of `v` over the view.
fn contour(f: &Frame, v: impl Fn(f64, f64) -> f64) -> String {
    let n = CONTOUR;
    let step = 2.0 * f.half / n as f64;
    let at = |i: usize| -f.half + i as f64 * step;
    let grid: Vec<Vec<f64>> = (0..=n)
        .map(|i| (0..=n).map(|j| v(at(i), at(j))).collect())
        .collect();
    let mut d = String::new();
    for i in 0..n {
        for j in 0..n {
            let c = [
                grid[i][j],
                grid[i + 1][j],
                grid[i + 1][j + 1],
                grid[i][j + 1],
            ];
            if c.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let p = [
                (at(i), at(j)),
                (at(i + 1), at(j)),
                (at(i + 1), at(j + 1)),
                (at(i), at(j + 1)),
            ];
            let mut cross = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (c[e], c[(e + 1) % 4]);
                if (a < 0.0) != (b < 0.0) {
                    let t = a / (a - b);
                    let (pa, pb) = (p[e], p[(e + 1) % 4]);
                    cross.push((pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1)));
                }
            }
            for pair in cross.chunks_exact(2) {
                let _ = write!(
                    d,
                    "M{:.2} {:.2} L{:.2} {:.2} ",
                    f.px(pair[0].0),
                    f.py(pair[0].1),
                    f.px(pair[1].0),
                    f.py(pair[1].1)
                );
            }
        }
    }
    d.trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use koopstab::edmd::ErrorBound;
    use koopstab::lifting::pendulum_dictionary;
    use koopstab::plant::{make_pendulum, BoxDomain};
    use koopstab::synthesis::Route;
    use nalgebra::DMatrix;

    fn cert() -> ControllerCert<f64> {
        ControllerCert::from_parts(
            Route::Direct,
            DMatrix::identity(4, 4) * 0.1,
            DMatrix::from_row_slice(4, 1, &[-0.5, -0.8, 0.0, 0.0]),
            3.0,
            1.5,
            5.0,
            10.0,
            1.0,
            f64::INFINITY,
            ErrorBound { c1: 0.1, c2: 0.1 },
        )
        .unwrap()
    }

    #[test]
    fn empty_trajectory_list_draws_axes_and_field() {
        let svg = phase_plot_svg(
            &[],
            &cert(),
            &make_pendulum(),
            &pendulum_dictionary(),
            View {
                half: 2.0,
                origin_radius: 0.05,
            },
        )
        .unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("stroke=\"#9a9a9a\""));
        assert!(!svg.contains("r=\"4\""));
    }

    #[test]
    fn contour_of_a_circle() {
        let f = Frame { half: 2.0 };
        let d = contour(&f, |x, y| x * x + y * y - 1.0);
        let n = d.matches('M').count();
        assert!(n > 100, "{n} segments");
        assert!(contour(&f, |_, _| 1.0).is_empty());
    }

    #[test]
    fn three_states_are_unsupported() {
        let plant = koopstab::plant::bilinear_plant(
            DMatrix::<f64>::identity(3, 3),
            DMatrix::zeros(3, 1),
            vec![DMatrix::zeros(3, 3)],
            BoxDomain::cube(3, -1.0, 1.0),
        )
        .unwrap();
        let dict = Dictionary::identity(3);
        let c = ControllerCert::from_parts(
            Route::Direct,
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 1),
            2.0,
            2.0,
            1.0,
            1.0,
            1.0,
            f64::INFINITY,
            ErrorBound { c1: 0.0, c2: 0.0 },
        )
        .unwrap();
        let r = phase_plot_svg(
            &[],
            &c,
            &plant,
            &dict,
            View {
                half: 1.0,
                origin_radius: 0.1,
            },
        );
        assert!(matches!(r, Err(PlotError::Unsupported(3))));
    }
}
