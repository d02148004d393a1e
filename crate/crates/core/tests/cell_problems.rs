use std::f64::consts::TAU;

use nalgebra::DMatrix;
use xdhom_core::cellproblem::{
    solve_coupled_cell_with, solve_scalar_cell, solve_scalar_cell_with, CellSolveOptions,
};
use xdhom_core::effective::{dhom, dhom_perforated, AverageNormalization};
use xdhom_core::geometry::{
    sample_coefficient, CellGeometry, CellGrid, CoefficientSpec, HoleShape,
};
use xdhom_core::harness::least_squares;
use xdhom_core::linalg::KrylovOptions;

fn tight() -> CellSolveOptions {
    CellSolveOptions {
        krylov: KrylovOptions {
            rel_tol: 1e-12,
            max_iter: None,
        },
        ..Default::default()
    }
}

fn smooth_1d(n: usize) -> (CellGrid, Vec<f64>) {
    let grid = CellGrid::new(CellGeometry::unit(1), n).unwrap();
    let spec = CoefficientSpec::Sinusoid {
        axis: 0,
        mean: vec![2.0],
        amplitude: vec![1.0],
    };
    let p = sample_coefficient(&spec, &grid).unwrap();
    let w = solve_scalar_cell_with(&p, &grid, &tight())
        .unwrap()
        .scalar(0)
        .to_vec();
    (grid, w)
}

#[test]
fn smooth_coefficient_corrector_converges_at_second_order() {
    let sizes = [16usize, 32, 64, 128];
    let mut diffs = Vec::new();
    for &n in &sizes {
        let (_, coarse) = smooth_1d(n);
        let (_, fine) = smooth_1d(2 * n);
        // Coarse node i sits at fine node 2i.
        let h = 1.0 / n as f64;
        let sq: f64 = coarse
            .iter()
            .enumerate()
            .map(|(i, c)| (c - fine[2 * i]).powi(2) * h)
            .sum();
        diffs.push(sq.sqrt());
    }
    assert!(diffs.windows(2).all(|w| w[1] < w[0]), "{diffs:?}");
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = diffs.iter().map(|d| d.ln()).collect();
    let order = -least_squares(&xs, &ys).0;
    assert!(order >= 1.9, "order {order}, diffs {diffs:?}");
}

#[test]
fn separable_coefficient_reduces_to_one_dimension() {
    let n = 32;
    let grid2 = CellGrid::new(CellGeometry::unit(2), n).unwrap();
    let spec2 = CoefficientSpec::function(|k, y: &[f64]| match k {
        0 => 2.0 + (TAU * y[0]).sin(),
        _ => 1.5 + 0.5 * (TAU * y[0]).cos() * (TAU * y[1]).sin(),
    });
    let p2 = sample_coefficient(&spec2, &grid2).unwrap();
    let w2 = solve_scalar_cell_with(&p2, &grid2, &tight()).unwrap();

    let grid1 = CellGrid::new(CellGeometry::unit(1), n).unwrap();
    let spec1 = CoefficientSpec::function(|_, y: &[f64]| 2.0 + (TAU * y[0]).sin());
    let p1 = sample_coefficient(&spec1, &grid1).unwrap();
    let w1 = solve_scalar_cell_with(&p1, &grid1, &tight()).unwrap();

    let field = w2.scalar(0);
    let mut worst = 0.0f64;
    for node in 0..grid2.num_nodes() {
        let idx = grid2.multi_index(node);
        worst = worst.max((field[node] - w1.scalar(0)[idx[0]]).abs());
    }
    assert!(worst <= 1e-8, "deviation {worst}");
}

#[test]
fn coefficient_varying_in_both_directions_converges() {
    let grid = CellGrid::new(CellGeometry::unit(2), 48).unwrap();
    let spec = CoefficientSpec::function(|k, y: &[f64]| match k {
        0 => 2.0 + (TAU * y[0]).sin() * (TAU * y[1]).cos(),
        _ => 3.0 + 0.5 * (TAU * y[0]).cos(),
    });
    let p = sample_coefficient(&spec, &grid).unwrap();
    let s = solve_scalar_cell(&p, &grid).unwrap();
    assert!(s.residual_norms.iter().all(|&r| r <= 1e-10));
    for l in 0..2 {
        assert!(s.assembly.mean(s.scalar(l)).abs() <= 1e-12 * s.max_norm());
    }
}

#[test]
fn nonsymmetric_constant_matrix_keeps_scalar_structure() {
    // Any invertible constant matrix factors out of the coupled problem.
    let grid = CellGrid::new(CellGeometry::unit(2), 24).unwrap();
    let p = sample_coefficient(&CoefficientSpec::two_phase(2, 1.0, 5.0), &grid).unwrap();
    let ahat = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, -0.2, 0.5]);
    let coupled = solve_coupled_cell_with(&ahat, &p, &grid, 1e-6, &tight()).unwrap();
    let scalar = solve_scalar_cell_with(&p, &grid, &tight()).unwrap();
    for k in 0..2 {
        for l in 0..2 {
            for j in 0..2 {
                let w = coupled.coupled(k, l, j);
                let worst = if j == l {
                    w.iter()
                        .zip(scalar.scalar(k))
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                } else {
                    w.iter().fold(0.0f64, |m, a| m.max(a.abs()))
                };
                assert!(worst <= 1e-9, "k={k} l={l} j={j}: {worst}");
            }
        }
    }
}

#[test]
fn effective_coefficient_lies_between_harmonic_and_arithmetic_means() {
    let grid = CellGrid::new(CellGeometry::unit(2), 32).unwrap();
    let spec = CoefficientSpec::function(|_, y: &[f64]| {
        3.0 + 2.0 * (TAU * y[0]).sin() * (TAU * y[1]).sin()
    });
    let p = sample_coefficient(&spec, &grid).unwrap();
    let d = dhom(&p, &grid).unwrap();
    let (reuss, voigt) = (p.harmonic_mean(0), p.arithmetic_mean(0));
    for lambda in d.symmetric_eigenvalues() {
        assert!(
            lambda >= reuss - 1e-10 && lambda <= voigt + 1e-10,
            "{reuss} <= {lambda} <= {voigt}"
        );
    }
    // Symmetric under y0 <-> y1 exchange.
    assert!((d.dhom(0, 0) - d.dhom(1, 1)).abs() < 1e-10);
}

#[test]
fn shrinking_holes_approach_identity() {
    let mut gaps = Vec::new();
    for size in [0.5, 0.25, 0.125] {
        let geometry = CellGeometry::unit_square_with_hole(HoleShape::Box, size);
        let grid = CellGrid::new(geometry, 64).unwrap();
        let d = dhom_perforated(&grid, AverageNormalization::Fluid).unwrap();
        let eig = d.symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l > 0.0 && l <= 1.0 + 1e-8));
        gaps.push(1.0 - eig.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[2] < 0.05, "{gaps:?}");
}

#[test]
fn ball_hole_is_isotropic() {
    let geometry = CellGeometry::unit_square_with_hole(HoleShape::Ball, 0.3);
    let grid = CellGrid::new(geometry, 64).unwrap();
    let d = dhom_perforated(&grid, AverageNormalization::Fluid).unwrap();
    assert!((d.dhom(0, 0) - d.dhom(1, 1)).abs() < 1e-8);
    assert!(d.dhom(0, 1).abs() < 1e-8);
}
