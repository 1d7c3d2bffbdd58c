//! Property checks shared by the proptest suite and the acceptance run.
//!
//! Each `check_*` takes generated input and returns `Err` with a message on
//! violation, so both harnesses report the same thing.

#![allow(dead_code)]

use std::f64::consts::PI;

use periodic_homog::cell::{homogenized_tensor, solve_cells, CellOptions};
use periodic_homog::expr::{parse_expression, BinOp, Expression, Func, Node, NodeKind, Var};
use periodic_homog::measure::{
    invariant_measure_1d_closed_form, laminated_centering_integrals, solve_invariant_measure, CoefficientSet,
    MeasureOptions,
};
use periodic_homog::torus::{solve_poisson_torus, ScalarField, TorusGrid};
use periodic_homog::transform::transform;
use proptest::prelude::*;

pub type Check = Result<(), String>;

// ---------------------------------------------------------------- expressions

fn leaf(dim: usize) -> impl Strategy<Value = Node> {
    prop_oneof![
        (0u32..1000).prop_map(|k| Node::new(NodeKind::Const(k as f64))),
        (0.0f64..1e3).prop_map(|c| Node::new(NodeKind::Const(c))),
        (1e-8f64..1e8).prop_map(|c| Node::new(NodeKind::Const(c))),
        Just(Node::new(NodeKind::Pi)),
        (1..=dim).prop_map(|i| Node::new(NodeKind::Var(Var::Y(i)))),
        (1..=dim).prop_map(|i| Node::new(NodeKind::Var(Var::X(i)))),
    ]
}

fn binop() -> impl Strategy<Value = BinOp> {
    prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div), Just(BinOp::Pow)]
}

fn func() -> impl Strategy<Value = Func> {
    prop_oneof![
        Just(Func::Sin),
        Just(Func::Cos),
        Just(Func::Exp),
        Just(Func::Log),
        Just(Func::Sqrt),
        Just(Func::Tanh)
    ]
}

/// Random syntax trees of depth at most 8.
pub fn arb_tree(dim: usize) -> impl Strategy<Value = Node> {
    leaf(dim).prop_recursive(8, 96, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Node::new(NodeKind::Neg(Box::new(a)))),
            (binop(), inner.clone(), inner.clone())
                .prop_map(|(op, l, r)| Node::new(NodeKind::Binary(op, Box::new(l), Box::new(r)))),
            (func(), inner).prop_map(|(f, a)| Node::new(NodeKind::Call(f, Box::new(a)))),
        ]
    })
}

pub fn check_round_trip(tree: Node, dim: usize) -> Check {
    let e = Expression::from_tree(tree, dim).map_err(|e| e.to_string())?;
    let printed = e.to_string();
    let back = parse_expression(&printed, dim).map_err(|err| format!("`{printed}` does not parse: {err}"))?;
    if !back.same_shape(&e) {
        return Err(format!("`{printed}` reparses as `{back}`"));
    }
    Ok(())
}

enum Op {
    Push(f64),
    Load(usize),
    Neg,
    Bin(BinOp),
    Call(Func),
}

fn compile(node: &Node, prog: &mut Vec<Op>) {
    match &node.kind {
        NodeKind::Const(c) => prog.push(Op::Push(*c)),
        NodeKind::Pi => prog.push(Op::Push(PI)),
        NodeKind::Var(v) => prog.push(Op::Load(v.index() - 1)),
        NodeKind::Neg(a) => {
            compile(a, prog);
            prog.push(Op::Neg);
        }
        NodeKind::Binary(op, l, r) => {
            compile(l, prog);
            compile(r, prog);
            prog.push(Op::Bin(*op));
        }
        NodeKind::Call(f, a) => {
            compile(a, prog);
            prog.push(Op::Call(*f));
        }
    }
}

/// Postfix stack machine; `None` where the tree evaluator must report a
/// domain error.
fn run_program(prog: &[Op], point: &[f64]) -> Option<f64> {
    let mut stack: Vec<f64> = Vec::with_capacity(16);
    for op in prog {
        let v = match op {
            Op::Push(c) => *c,
            Op::Load(i) => point[*i],
            Op::Neg => -stack.pop()?,
            Op::Bin(b) => {
                let r = stack.pop()?;
                let l = stack.pop()?;
                match b {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div if r == 0.0 => return None,
                    BinOp::Div => l / r,
                    BinOp::Pow if l == 0.0 && r < 0.0 => return None,
                    BinOp::Pow => {
                        let p = l.powf(r);
                        if p.is_nan() {
                            return None;
                        }
                        p
                    }
                }
            }
            Op::Call(f) => {
                let x = stack.pop()?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Tanh => x.tanh(),
                    Func::Log if x <= 0.0 => return None,
                    Func::Log => x.ln(),
                    Func::Sqrt if x < 0.0 => return None,
                    Func::Sqrt => x.sqrt(),
                }
            }
        };
        stack.push(v);
    }
    stack.pop()
}

pub fn check_evaluator(tree: Node, dim: usize, point: &[f64]) -> Check {
    let mut prog = Vec::new();
    compile(&tree, &mut prog);
    let e = Expression::from_tree(tree, dim).map_err(|e| e.to_string())?;
    let want = run_program(&prog, point);
    match (e.evaluate(point), want) {
        (Err(_), None) => Ok(()),
        (Ok(a), Some(b)) if a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()) => Ok(()),
        (Ok(a), Some(b)) if (a - b).abs() <= 1e-14 * a.abs().max(b.abs()) => Ok(()),
        (got, want) => Err(format!("`{e}` at {point:?}: tree {got:?}, stack machine {want:?}")),
    }
}

// --------------------------------------------------------------------- fields

pub fn arb_grid_values() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(prop::sample::select(vec![8usize, 10, 12, 16]), 1..=3).prop_flat_map(|sizes| {
        let n: usize = sizes.iter().product();
        (Just(sizes), prop::collection::vec(-10.0f64..10.0, n))
    })
}

pub fn check_parseval(sizes: &[usize], values: Vec<f64>) -> Check {
    let grid = TorusGrid::new(sizes).map_err(|e| e.to_string())?;
    let f = ScalarField::from_values(grid, values).map_err(|e| e.to_string())?;
    let energy = f.values().iter().map(|v| v * v).sum::<f64>() / grid.len() as f64;
    let spectral: f64 = f.spectrum().iter().map(|c| c.norm_sqr()).sum();
    if (energy - spectral).abs() > 1e-12 * energy.max(1.0) {
        return Err(format!("value energy {energy} vs spectral {spectral}"));
    }
    Ok(())
}

/// Zero-mean smooth right-hand sides as DSL text.
pub fn arb_zero_mean_rhs() -> impl Strategy<Value = String> {
    let mode = (1i32..=4, -4i32..=4, -1.0f64..1.0, 0.0f64..6.3)
        .prop_map(|(k1, k2, a, t)| format!("{a}*sin(2*pi*({k1}*y1 + {k2}*y2) + {t})"));
    let bump = (0.0f64..0.8, 1i32..=3, -1.0f64..1.0)
        .prop_map(|(c, k, a)| format!("{a}*exp({c}*sin(2*pi*y1))*cos(2*pi*{k}*y2)"));
    (prop::collection::vec(mode, 1..4), bump).prop_map(|(modes, b)| format!("{} + {b}", modes.join(" + ")))
}

pub fn check_poisson_plug_back(rhs_src: &str) -> Check {
    let grid = TorusGrid::cube(2, 128).map_err(|e| e.to_string())?;
    let e = parse_expression(rhs_src, 2).map_err(|e| e.to_string())?;
    let rhs = periodic_homog::expr::sample_scalar(&e, &grid).map_err(|e| e.to_string())?;
    let u = solve_poisson_torus(&rhs, 1e-10).map_err(|e| e.to_string())?;
    let r = u.laplacian().max_diff(&rhs).map_err(|e| e.to_string())?;
    if r > 1e-10 {
        return Err(format!("plug-back residual {r:e} for {rhs_src}"));
    }
    Ok(())
}

// ------------------------------------------------------------------ measures

/// Positive-definite `ã` and arbitrary (usually non-centered) `b̃`.
#[derive(Debug, Clone)]
pub struct RandomCoefficients {
    pub dim: usize,
    pub a: Vec<Vec<String>>,
    pub b: Vec<String>,
}

impl RandomCoefficients {
    pub fn build(&self, n: usize) -> Result<CoefficientSet, String> {
        self.build_on(&vec![n; self.dim])
    }

    pub fn build_on(&self, sizes: &[usize]) -> Result<CoefficientSet, String> {
        let grid = TorusGrid::new(sizes).map_err(|e| e.to_string())?;
        let p = |s: &String| parse_expression(s, self.dim).map_err(|e| e.to_string());
        let a = self.a.iter().map(|r| r.iter().map(p).collect::<Result<Vec<_>, _>>()).collect::<Result<Vec<_>, _>>()?;
        let b = self.b.iter().map(p).collect::<Result<Vec<_>, _>>()?;
        CoefficientSet::from_expressions(&grid, &a, &b).map_err(|e| e.to_string())
    }
}

fn wave(var: &str) -> impl Strategy<Value = String> {
    let var = var.to_string();
    (1i32..=2, 0.0f64..6.3).prop_map(move |(k, t)| format!("2*pi*{k}*{var} + {t}"))
}

pub fn arb_coefficients() -> impl Strategy<Value = RandomCoefficients> {
    let one = (0.0f64..0.8, wave("y1"), -1.0f64..1.0, 0.0f64..1.0, wave("y1")).prop_map(|(a, w, c0, c1, v)| {
        RandomCoefficients {
            dim: 1,
            a: vec![vec![format!("1.5 + {a}*sin({w})")]],
            b: vec![format!("{c0} + {c1}*cos({v})")],
        }
    });
    let two = (0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.4, wave("y1"), wave("y2"), -1.0f64..1.0, -1.0f64..1.0).prop_map(
        |(a, b, s, w1, w2, c1, c2)| RandomCoefficients {
            dim: 2,
            a: vec![
                vec![format!("2 + {a}*sin({w1})"), format!("{s}*cos({w1})*sin({w2})")],
                vec![format!("{s}*cos({w1})*sin({w2})"), format!("1.5 + {b}*cos({w2})")],
            ],
            b: vec![format!("{c1}*cos({w2})"), format!("{c2} + sin({w1})")],
        },
    );
    prop_oneof![one, two]
}

pub fn check_measure_scaling(c: &RandomCoefficients, scale: f64) -> Check {
    let n = if c.dim == 1 { 64 } else { 16 };
    let base = c.build(n)?;
    let scaled = base.scaled(scale).map_err(|e| e.to_string())?;
    let opts = MeasureOptions::default();
    let m = solve_invariant_measure(&base, &opts).map_err(|e| e.to_string())?;
    let ms = solve_invariant_measure(&scaled, &opts).map_err(|e| e.to_string())?;
    let d = m.m.max_diff(&ms.m).map_err(|e| e.to_string())?;
    if d > 1e-10 * m.max_value {
        return Err(format!("m changes by {d:e} under scaling by {scale}"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Laminated {
    pub a: [f64; 3],
    pub drift_mean: f64,
    pub drift_wave: f64,
    pub cross: f64,
}

pub fn arb_laminated() -> impl Strategy<Value = Laminated> {
    (0.0f64..0.8, 0.0f64..0.4, 0.0f64..0.5, prop_oneof![Just(0.0), -1.0f64..1.0], 0.0f64..1.5, -1.0f64..1.0)
        .prop_map(|(a1, s, a2, drift_mean, drift_wave, cross)| Laminated { a: [a1, s, a2], drift_mean, drift_wave, cross })
}

impl Laminated {
    fn strings(&self) -> (Vec<Vec<String>>, Vec<String>) {
        let [a1, s, a2] = self.a;
        let a = vec![
            vec![format!("2 + {a1}*sin(2*pi*y1)"), format!("{s}*sin(2*pi*y1)")],
            vec![format!("{s}*sin(2*pi*y1)"), format!("1 + {a2}*cos(2*pi*y1)")],
        ];
        let b = vec![
            format!("{} + {}*cos(2*pi*y1)", self.drift_mean, self.drift_wave),
            format!("{}*sin(4*pi*y1) + 0.2*cos(2*pi*y1)", self.cross),
        ];
        (a, b)
    }

    pub fn coefficients(&self) -> Result<CoefficientSet, String> {
        let (a, b) = self.strings();
        RandomCoefficients { dim: 2, a, b }.build_on(&[64, 8])
    }

    pub fn line(&self) -> Result<CoefficientSet, String> {
        let (a, b) = self.strings();
        RandomCoefficients { dim: 1, a: vec![vec![a[0][0].clone()]], b: vec![b[0].clone()] }.build_on(&[64])
    }
}

/// `m` of y1-only coefficients is the 1D measure of `(ã₁₁, b̃₁)`, and the
/// first centering integral has the sign of the first defect.
pub fn check_laminated_reduction(l: &Laminated) -> Check {
    let c2 = l.coefficients()?;
    let m2 = solve_invariant_measure(&c2, &MeasureOptions::default()).map_err(|e| e.to_string())?;
    let m1 = invariant_measure_1d_closed_form(&l.line()?).map_err(|e| e.to_string())?;
    let (n1, n2) = (64, 8);
    let mut worst: f64 = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            worst = worst.max((m2.m.values()[i * n2 + j] - m1.values()[i]).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!("2D measure differs from the 1D closed form by {worst:e}"));
    }
    let integrals = laminated_centering_integrals(&c2).map_err(|e| e.to_string())?;
    let defect = &m2.centering_defect;
    if integrals[0].abs() > 1e-8 && integrals[0].signum() != defect[0].signum() {
        return Err(format!("sign mismatch: integral {} vs defect {}", integrals[0], defect[0]));
    }
    if (integrals[0].abs() <= 1e-8) != (defect[0].abs() <= 1e-8) {
        return Err(format!("zero mismatch: integral {} vs defect {}", integrals[0], defect[0]));
    }
    // with the first integral zero the second one is the second defect up to
    // the positive normalization of m
    if integrals[0].abs() <= 1e-12 && integrals[1].abs() > 1e-8 && integrals[1].signum() != defect[1].signum() {
        return Err(format!("sign mismatch: integral {} vs defect {}", integrals[1], defect[1]));
    }
    Ok(())
}

// ----------------------------------------------------------- effective tensor

/// Centered 2D data with `m ≡ 1`: `b̃ = div ã + (∂₂ψ, −∂₁ψ)`.
#[derive(Debug, Clone)]
pub struct Centered2D {
    pub amp: [f64; 3],
    pub k: [i32; 3],
    pub stream: f64,
    pub stream_k: [i32; 2],
}

pub fn arb_centered_2d() -> impl Strategy<Value = Centered2D> {
    (
        (0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.4),
        (1i32..=2, 1i32..=2, 1i32..=2),
        0.0f64..0.5,
        (1i32..=2, 0i32..=2),
    )
        .prop_map(|((a1, a2, s), (k1, k2, k3), stream, (r1, r2))| Centered2D {
            amp: [a1, a2, s],
            k: [k1, k2, k3],
            stream,
            stream_k: [r1, r2],
        })
}

impl Centered2D {
    /// Row-major `ã` and `b̃`; `swap` exchanges the two axes.
    pub fn strings(&self, swap: bool) -> (Vec<Vec<String>>, Vec<String>) {
        let (y1, y2) = if swap { ("y2", "y1") } else { ("y1", "y2") };
        let [a1, a2, s] = self.amp;
        let [k1, k2, k3] = self.k;
        let [r1, r2] = self.stream_k;
        let psi_arg = format!("2*pi*({r1}*{y1} + {r2}*{y2})");
        let c = self.stream;
        // ã11 = 2 + a1 sin(2πk1 y1), ã22 = 1.5 + a2 cos(2πk2 y2), ã12 = s sin(2πk3 (y1+y2))
        let a11 = format!("2 + {a1}*sin(2*pi*{k1}*{y1})");
        let a22 = format!("1.5 + {a2}*cos(2*pi*{k2}*{y2})");
        let a12 = format!("{s}*sin(2*pi*{k3}*({y1} + {y2}))");
        // (div ã)_1 = ∂1 ã11 + ∂2 ã21, (div ã)_2 = ∂1 ã12 + ∂2 ã22
        let d11 = format!("2*pi*{k1}*{a1}*cos(2*pi*{k1}*{y1})");
        let d12 = format!("2*pi*{k3}*{s}*cos(2*pi*{k3}*({y1} + {y2}))");
        let d22 = format!("-2*pi*{k2}*{a2}*sin(2*pi*{k2}*{y2})");
        // ψ = c sin(psi_arg): (∂2ψ, −∂1ψ)
        let s1 = format!("2*pi*{r2}*{c}*cos({psi_arg})");
        let s2 = format!("-2*pi*{r1}*{c}*cos({psi_arg})");
        let b1 = format!("{d11} + {d12} + {s1}");
        let b2 = format!("{d12} + {d22} + {s2}");
        if swap {
            // axis 1 of the swapped problem is axis 2 of the original
            (vec![vec![a22, a12.clone()], vec![a12, a11]], vec![b2, b1])
        } else {
            (vec![vec![a11, a12.clone()], vec![a12, a22]], vec![b1, b2])
        }
    }

    pub fn a_bar(&self, swap: bool, n: usize) -> Result<Vec<Vec<f64>>, String> {
        let (a, b) = self.strings(swap);
        let coeffs = RandomCoefficients { dim: 2, a, b }.build(n)?;
        let m = solve_invariant_measure(&coeffs, &MeasureOptions::default()).map_err(|e| e.to_string())?;
        let tc = transform(&coeffs, &m, false).map_err(|e| e.to_string())?;
        let cells = solve_cells(&coeffs, &tc.q, &CellOptions::default()).map_err(|e| e.to_string())?;
        let t = homogenized_tensor(&tc.q, &coeffs, &m.m, &cells, tc.lambda1).map_err(|e| e.to_string())?;
        Ok(t.a_bar)
    }
}

pub fn check_permutation_equivariance(c: &Centered2D) -> Check {
    let n = 32;
    let a = c.a_bar(false, n)?;
    let p = c.a_bar(true, n)?;
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            worst = worst.max((p[i][j] - a[1 - i][1 - j]).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!("swapped-axis tensor differs by {worst:e}: {a:?} vs {p:?}"));
    }
    Ok(())
}
