//! sRGB (D65) <-> CIELAB.

use super::{Frame, LabFrame};
use crate::autodiff::{Graph, Pointwise, Scalar, Var};
use crate::error::Result;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const DELTA: f64 = 6.0 / 29.0;

fn xyz_to_rgb() -> [[f64; 3]; 3] {
    let m = RGB_TO_XYZ;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // adjugate: cofactor of (c, r)
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| RGB_TO_XYZ[r][c] * lin[c]).sum());
    let f: [f64; 3] = std::array::from_fn(|i| lab_f(xyz[i] / WHITE[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Inverse conversion; out-of-gamut results are clamped to `[0, 1]`.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz: [f64; 3] = std::array::from_fn(|i| Pointwise::LabFInv.apply(f[i]) * WHITE[i]);
    let inv = xyz_to_rgb();
    std::array::from_fn(|r| {
        let lin: f64 = (0..3).map(|c| inv[r][c] * xyz[c]).sum();
        Pointwise::SrgbEncode.apply(lin.clamp(0.0, 1.0))
    })
}

pub fn rgb_to_lab(frame: &Frame) -> LabFrame {
    let lab = frame
        .rgb()
        .chunks(3)
        .flat_map(|p| rgb_to_lab_pixel([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect();
    LabFrame::new(frame.height(), frame.width(), lab).expect("same extents as a valid frame")
}

pub fn lab_to_rgb(lab: &LabFrame) -> Frame {
    let rgb = lab
        .values()
        .chunks(3)
        .flat_map(|p| lab_to_rgb_pixel([p[0], p[1], p[2]]).map(|v| v as f32))
        .collect();
    Frame::from_clamped(lab.height(), lab.width(), rgb).expect("same extents as a valid lab frame")
}

/// Differentiable Lab -> sRGB for an `H x W x 3` graph value, matching
/// [`lab_to_rgb_pixel`].
pub fn lab_to_rgb_graph<T: Scalar>(g: &mut Graph<T>, lab: Var) -> Result<Var> {
    let k = 1.0 / 116.0;
    // rows: L, a, b ; columns: fx, fy, fz
    let to_f = [k, k, k, 1.0 / 500.0, 0.0, 0.0, 0.0, 0.0, -1.0 / 200.0].map(T::lit);
    let bias = [16.0 / 116.0; 3].map(T::lit);
    let f = g.channel_linear(lab, &to_f, &bias)?;
    let t = g.pointwise(f, Pointwise::LabFInv);
    let inv = xyz_to_rgb();
    let mix: Vec<T> = (0..3)
        .flat_map(|k| (0..3).map(move |c| (k, c)))
        .map(|(k, c)| T::lit(inv[c][k] * WHITE[k]))
        .collect();
    let lin = g.channel_linear(t, &mix, &[T::zero(); 3])?;
    let lin = g.pointwise(lin, Pointwise::Clamp01);
    Ok(g.pointwise(lin, Pointwise::SrgbEncode))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_and_white_points() {
        let black = rgb_to_lab_pixel([0.0, 0.0, 0.0]);
        assert!(black.iter().all(|v| v.abs() < 1e-9), "{black:?}");
        let white = rgb_to_lab_pixel([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 0.01 && white[2].abs() < 0.01, "{white:?}");
    }

    #[test]
    fn pure_red_matches_hand_evaluation() {
        // Independent evaluation: linear red = (1, 0, 0) so XYZ is the first
        // matrix column; f(t) = cbrt(t) since every ratio exceeds (6/29)^3.
        let (x, y, z) = (0.4124564f64 / 0.95047, 0.2126729f64, 0.0193339f64 / 1.08883);
        let (fx, fy, fz) = (x.cbrt(), y.cbrt(), z.cbrt());
        let want = [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)];
        let got = rgb_to_lab_pixel([1.0, 0.0, 0.0]);
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
        // Published reference values for sRGB red.
        assert!((got[0] - 53.2408).abs() < 0.01);
        assert!((got[1] - 80.0925).abs() < 0.01);
        assert!((got[2] - 67.2032).abs() < 0.01);
    }

    #[test]
    fn round_trip_within_one_level() {
        for r in (0..=255).step_by(17) {
            for gr in (0..=255).step_by(51) {
                for b in (0..=255).step_by(85) {
                    let rgb = [r as f64 / 255.0, gr as f64 / 255.0, b as f64 / 255.0];
                    let back = lab_to_rgb_pixel(rgb_to_lab_pixel(rgb));
                    for i in 0..3 {
                        assert!((back[i] - rgb[i]).abs() < 1.0 / 255.0, "{rgb:?} -> {back:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn graph_conversion_agrees_with_pixel_path() {
        let labs = [[53.0, 80.0, 67.0], [5.0, -3.0, 2.0], [97.0, -20.0, 90.0], [40.0, 10.0, -60.0]];
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2, 2, 3], labs.iter().flatten().copied().collect()).unwrap();
        let y = lab_to_rgb_graph(&mut g, x).unwrap();
        for (i, lab) in labs.iter().enumerate() {
            let want = lab_to_rgb_pixel(*lab);
            for (got, want) in g.value(y)[i * 3..i * 3 + 3].iter().zip(want) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
