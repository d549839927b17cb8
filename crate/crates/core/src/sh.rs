//! Real spherical-harmonics color evaluation up to degree 3, with the
//! derivative of every basis function with respect to the view direction.

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of coefficients for a given degree, `(deg + 1)²`.
#[inline]
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Maps an RGB value to the degree-0 coefficient (colors are offset by 0.5).
#[inline]
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

#[inline]
pub fn dc_to_rgb(dc: f64) -> f64 {
    dc * SH_C0 + 0.5
}

/// Basis values for a unit direction. Only the first `coeff_count(degree)` entries are filled.
pub fn basis(degree: usize, d: [f64; 3]) -> [f64; 16] {
    let mut b = [0.0; 16];
    let [x, y, z] = d;
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial with respect to (x, y, z).
pub fn basis_jacobian(degree: usize, d: [f64; 3]) -> [[f64; 3]; 16] {
    let mut j = [[0.0; 3]; 16];
    let [x, y, z] = d;
    if degree >= 1 {
        j[1] = [0.0, -SH_C1, 0.0];
        j[2] = [0.0, 0.0, SH_C1];
        j[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        j[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        j[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        j[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        j[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        j[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            j[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            j[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
            j[11] = [
                SH_C3[2] * (-2.0 * x * y),
                SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                SH_C3[2] * 8.0 * y * z,
            ];
            j[12] = [
                SH_C3[3] * (-6.0 * x * z),
                SH_C3[3] * (-6.0 * y * z),
                SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            j[13] = [
                SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
                SH_C3[4] * (-2.0 * x * y),
                SH_C3[4] * 8.0 * x * z,
            ];
            j[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * (-2.0 * y * z), SH_C3[5] * (xx - yy)];
            j[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0];
        }
    }
    j
}

/// Unclamped color `Σ b_k c_k + 0.5` for a unit direction.
pub fn eval_color(degree: usize, coeffs: &[[f64; 3]], dir: [f64; 3]) -> [f64; 3] {
    let b = basis(degree, dir);
    let mut rgb = [0.5; 3];
    for (k, c) in coeffs.iter().enumerate().take(coeff_count(degree)) {
        for ch in 0..3 {
            rgb[ch] += b[k] * c[ch];
        }
    }
    rgb
}
