//! Quadrature rules in barycentric form; weights are normalised to sum to one.

/// Edge-midpoint rule, exact for quadratics.
pub const TRI_MIDPOINT: [([f64; 3], f64); 3] = [
    ([0.5, 0.5, 0.0], 1.0 / 3.0),
    ([0.0, 0.5, 0.5], 1.0 / 3.0),
    ([0.5, 0.0, 0.5], 1.0 / 3.0),
];

const A1: f64 = 0.059_715_871_789_769_82;
const B1: f64 = 0.470_142_064_105_115_1;
const A2: f64 = 0.797_426_985_353_087_3;
const B2: f64 = 0.101_286_507_323_456_3;
const W1: f64 = 0.132_394_152_788_506_18;
const W2: f64 = 0.125_939_180_544_827_15;

/// Seven-point rule of degree five.
pub const TRI_DEGREE5: [([f64; 3], f64); 7] = [
    ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
    ([A1, B1, B1], W1),
    ([B1, A1, B1], W1),
    ([B1, B1, A1], W1),
    ([A2, B2, B2], W2),
    ([B2, A2, B2], W2),
    ([B2, B2, A2], W2),
];

const G: f64 = 0.288_675_134_594_812_9; // 1/(2√3)

/// Two-point Gauss rule on `[0, 1]` as `(s, weight)`.
pub const GAUSS2: [(f64, f64); 2] = [(0.5 - G, 0.5), (0.5 + G, 0.5)];

pub fn bary_point(p: [[f64; 2]; 3], l: [f64; 3]) -> [f64; 2] {
    [
        l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
        l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
    ]
}

/// Integral of `f` over the triangle `p`, with `m²` congruent sub-triangles and the degree five rule.
pub fn integrate_triangle(p: [[f64; 2]; 3], m: usize, f: &dyn Fn([f64; 2]) -> f64) -> f64 {
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    let m = m.max(1);
    let h = 1.0 / m as f64;
    let at = |i: usize, j: usize| bary_point(p, [1.0 - (i + j) as f64 * h, i as f64 * h, j as f64 * h]);
    let mut sum = 0.0;
    let mut sub = |q: [[f64; 2]; 3]| {
        for (l, w) in TRI_DEGREE5 {
            sum += w * f(bary_point(q, l));
        }
    };
    for i in 0..m {
        for j in 0..m - i {
            sub([at(i, j), at(i + 1, j), at(i, j + 1)]);
            if i + j + 1 < m {
                sub([at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)]);
            }
        }
    }
    sum * area / (m * m) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        let s: f64 = TRI_MIDPOINT.iter().map(|x| x.1).sum();
        assert!((s - 1.0).abs() < 1e-15);
        let s: f64 = TRI_DEGREE5.iter().map(|x| x.1).sum();
        assert!((s - 1.0).abs() < 1e-14);
        let s: f64 = GAUSS2.iter().map(|x| x.1).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_rule_is_exact_for_quadratics() {
        // ∫ over the reference triangle of x² = 1/12, of x·y = 1/24
        let p = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let q = |f: &dyn Fn([f64; 2]) -> f64| -> f64 {
            TRI_MIDPOINT.iter().map(|(l, w)| w * f(bary_point(p, *l))).sum::<f64>() * 0.5
        };
        assert!((q(&|x| x[0] * x[0]) - 1.0 / 12.0).abs() < 1e-15);
        assert!((q(&|x| x[0] * x[1]) - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn degree5_rule_with_subdivision() {
        let p = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        // ∫ x⁴ = 4!·2!/6! ... = 1/30
        for m in [1, 3] {
            let v = integrate_triangle(p, m, &|x| x[0].powi(4));
            assert!((v - 1.0 / 30.0).abs() < 1e-15, "{v}");
        }
        let v = integrate_triangle(p, 16, &|x| (x[0] + 2.0 * x[1]).exp());
        let exact = ((2.0f64).exp() - 1.0) / 2.0 - ((1.0f64).exp() - 1.0);
        assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
    }
}
