//! Random-input helpers shared by the unit and acceptance test suites.

use crate::expr::Expr;
use rand::Rng;

/// Random expression tree of depth at most `max_depth` over `x1..x{d_x}`.
///
/// Weighted towards polynomial shapes; `exp` only appears applied to leaves
/// so values at moderate points stay representable.
pub fn random_expr<R: Rng>(rng: &mut R, d_x: usize, max_depth: usize) -> Expr {
    if max_depth == 0 {
        return random_leaf(rng, d_x);
    }
    match rng.random_range(0..10u32) {
        0 | 1 => random_leaf(rng, d_x),
        2 | 3 => Expr::Add(
            Box::new(random_expr(rng, d_x, max_depth - 1)),
            Box::new(random_expr(rng, d_x, max_depth - 1)),
        ),
        4 | 5 => Expr::Mul(
            Box::new(random_expr(rng, d_x, max_depth - 1)),
            Box::new(random_expr(rng, d_x, max_depth - 1)),
        ),
        6 => Expr::Pow(
            Box::new(random_expr(rng, d_x, max_depth - 1)),
            rng.random_range(0..4),
        ),
        7 => Expr::Neg(Box::new(random_expr(rng, d_x, max_depth - 1))),
        8 => match rng.random_range(0..3u32) {
            0 => Expr::Sin(Box::new(random_expr(rng, d_x, max_depth - 1))),
            1 => Expr::Cos(Box::new(random_expr(rng, d_x, max_depth - 1))),
            _ => Expr::Tanh(Box::new(random_expr(rng, d_x, max_depth - 1))),
        },
        _ => Expr::Exp(Box::new(random_leaf(rng, d_x))),
    }
}

fn random_leaf<R: Rng>(rng: &mut R, d_x: usize) -> Expr {
    if rng.random_bool(0.5) {
        Expr::Const((rng.random_range(-200..=200) as f64) / 100.0)
    } else {
        Expr::Var(rng.random_range(1..=d_x))
    }
}

/// Uniform random point in `[lo, hi]^{d_x}`.
pub fn random_point<R: Rng>(rng: &mut R, d_x: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d_x).map(|_| rng.random_range(lo..=hi)).collect()
}
