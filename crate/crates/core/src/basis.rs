//! Nodal Lagrange bases on Gauss-Lobatto points and Gauss-Legendre
//! quadrature on the reference interval [-1, 1].
//!
//! Cells are axis-aligned, so 2D bases and rules are tensor products and
//! all geometric mapping reduces to per-axis scaling.

/// Gauss-Legendre nodes and weights on [-1, 1], exact for degree 2n-1.
pub fn gauss_legendre(n: usize) -> (&'static [f64], &'static [f64]) {
    const X1: [f64; 1] = [0.0];
    const W1: [f64; 1] = [2.0];
    const X2: [f64; 2] = [-0.5773502691896257, 0.5773502691896257];
    const W2: [f64; 2] = [1.0, 1.0];
    const X3: [f64; 3] = [-0.7745966692414834, 0.0, 0.7745966692414834];
    const W3: [f64; 3] = [0.5555555555555556, 0.8888888888888888, 0.5555555555555556];
    const X4: [f64; 4] = [
        -0.8611363115940526,
        -0.3399810435848563,
        0.3399810435848563,
        0.8611363115940526,
    ];
    const W4: [f64; 4] = [
        0.34785484513745385,
        0.6521451548625461,
        0.6521451548625461,
        0.34785484513745385,
    ];
    const X5: [f64; 5] = [
        -0.9061798459386640,
        -0.5384693101056831,
        0.0,
        0.5384693101056831,
        0.9061798459386640,
    ];
    const W5: [f64; 5] = [
        0.23692688505618908,
        0.47862867049936647,
        0.5688888888888889,
        0.47862867049936647,
        0.23692688505618908,
    ];
    const X6: [f64; 6] = [
        -0.9324695142031521,
        -0.6612093864662645,
        -0.2386191860831969,
        0.2386191860831969,
        0.6612093864662645,
        0.9324695142031521,
    ];
    const W6: [f64; 6] = [
        0.17132449237917036,
        0.3607615730481386,
        0.46791393457269104,
        0.46791393457269104,
        0.3607615730481386,
        0.17132449237917036,
    ];
    const X7: [f64; 7] = [
        -0.9491079123427585,
        -0.7415311855993945,
        -0.4058451513773972,
        0.0,
        0.4058451513773972,
        0.7415311855993945,
        0.9491079123427585,
    ];
    const W7: [f64; 7] = [
        0.12948496616886969,
        0.27970539148927664,
        0.3818300505051189,
        0.4179591836734694,
        0.3818300505051189,
        0.27970539148927664,
        0.12948496616886969,
    ];
    match n {
        1 => (&X1, &W1),
        2 => (&X2, &W2),
        3 => (&X3, &W3),
        4 => (&X4, &W4),
        5 => (&X5, &W5),
        6 => (&X6, &W6),
        7 => (&X7, &W7),
        _ => panic!("gauss_legendre: unsupported point count {n}"),
    }
}

/// Gauss-Lobatto nodes on [-1, 1] for the given polynomial degree.
pub fn lobatto_points(degree: usize) -> &'static [f64] {
    const D0: [f64; 1] = [0.0];
    const D1: [f64; 2] = [-1.0, 1.0];
    const D2: [f64; 3] = [-1.0, 0.0, 1.0];
    const D3: [f64; 4] = [-1.0, -0.4472135954999579, 0.4472135954999579, 1.0];
    const D4: [f64; 5] = [
        -1.0,
        -0.6546536707079771,
        0.0,
        0.6546536707079771,
        1.0,
    ];
    match degree {
        0 => &D0,
        1 => &D1,
        2 => &D2,
        3 => &D3,
        4 => &D4,
        _ => panic!("lobatto_points: unsupported degree {degree}"),
    }
}

/// Value of the i-th Lagrange basis on `nodes` at `x`.
pub fn lagrange_value(nodes: &[f64], i: usize, x: f64) -> f64 {
    let mut v = 1.0;
    for (j, &xj) in nodes.iter().enumerate() {
        if j != i {
            v *= (x - xj) / (nodes[i] - xj);
        }
    }
    v
}

/// Derivative of the i-th Lagrange basis on `nodes` at `x`.
pub fn lagrange_deriv(nodes: &[f64], i: usize, x: f64) -> f64 {
    let mut sum = 0.0;
    for (k, &xk) in nodes.iter().enumerate() {
        if k == i {
            continue;
        }
        let mut term = 1.0 / (nodes[i] - xk);
        for (j, &xj) in nodes.iter().enumerate() {
            if j != i && j != k {
                term *= (x - xj) / (nodes[i] - xj);
            }
        }
        sum += term;
    }
    sum
}

/// Tensor-product nodal basis of the given degree in `dim` dimensions.
#[derive(Debug, Clone, Copy)]
pub struct TensorBasis {
    pub dim: usize,
    pub degree: usize,
    pub n1: usize,
    pub size: usize,
    nodes: &'static [f64],
}

impl TensorBasis {
    pub fn new(dim: usize, degree: usize) -> Self {
        let nodes = lobatto_points(degree);
        let n1 = nodes.len();
        Self {
            dim,
            degree,
            n1,
            size: n1.pow(dim as u32),
            nodes,
        }
    }

    pub fn nodes_1d(&self) -> &'static [f64] {
        self.nodes
    }

    /// Multi-index (ix, iy) of flat basis index i.
    pub fn multi(&self, i: usize) -> [usize; 2] {
        if self.dim == 1 {
            [i, 0]
        } else {
            [i % self.n1, i / self.n1]
        }
    }

    /// Reference coordinates of basis node i.
    pub fn node_ref(&self, i: usize) -> [f64; 2] {
        let m = self.multi(i);
        if self.dim == 1 {
            [self.nodes[m[0]], 0.0]
        } else {
            [self.nodes[m[0]], self.nodes[m[1]]]
        }
    }

    pub fn value(&self, i: usize, xi: [f64; 2]) -> f64 {
        let m = self.multi(i);
        let mut v = lagrange_value(self.nodes, m[0], xi[0]);
        if self.dim == 2 {
            v *= lagrange_value(self.nodes, m[1], xi[1]);
        }
        v
    }

    /// Gradient in reference coordinates.
    pub fn grad_ref(&self, i: usize, xi: [f64; 2]) -> [f64; 2] {
        let m = self.multi(i);
        if self.dim == 1 {
            [lagrange_deriv(self.nodes, m[0], xi[0]), 0.0]
        } else {
            let vx = lagrange_value(self.nodes, m[0], xi[0]);
            let vy = lagrange_value(self.nodes, m[1], xi[1]);
            [
                lagrange_deriv(self.nodes, m[0], xi[0]) * vy,
                vx * lagrange_deriv(self.nodes, m[1], xi[1]),
            ]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_polynomials_exactly() {
        for n in 1..=7 {
            let (x, w) = gauss_legendre(n);
            for k in 0..(2 * n) {
                let integral: f64 = x.iter().zip(w).map(|(xi, wi)| wi * xi.powi(k as i32)).sum();
                let exact = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
                assert!(
                    (integral - exact).abs() < 1e-13,
                    "n={n} k={k}: {integral} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn lagrange_partition_of_unity() {
        for degree in 1..=4 {
            let nodes = lobatto_points(degree);
            for &x in &[-0.9, -0.3, 0.11, 0.77, 1.0] {
                let sum: f64 = (0..nodes.len()).map(|i| lagrange_value(nodes, i, x)).sum();
                let dsum: f64 = (0..nodes.len()).map(|i| lagrange_deriv(nodes, i, x)).sum();
                assert!((sum - 1.0).abs() < 1e-13);
                assert!(dsum.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lagrange_interpolates_nodes() {
        let nodes = lobatto_points(3);
        for i in 0..4 {
            for j in 0..4 {
                let v = lagrange_value(nodes, i, nodes[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn derivative_reproduces_monomials() {
        let nodes = lobatto_points(3);
        // Interpolate x^3 and check the derivative 3x^2 at a few points.
        let coeffs: Vec<f64> = nodes.iter().map(|x| x.powi(3)).collect();
        for &x in &[-0.7, 0.2, 0.95] {
            let d: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| c * lagrange_deriv(nodes, i, x))
                .sum();
            assert!((d - 3.0 * x * x).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_basis_2d_kronecker() {
        let b = TensorBasis::new(2, 2);
        assert_eq!(b.size, 9);
        for i in 0..b.size {
            for j in 0..b.size {
                let v = b.value(i, b.node_ref(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-13);
            }
        }
    }
}
