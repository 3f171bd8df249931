//! Problem model `min g(x) s.t. q(x) in Theta`, the text format, and
//! pointwise evaluation of everything the analyses need.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cones::{self, ConeError, ConeKind, Reduction};
use crate::expr::{self, EvalBundle, EvalError, Expression, ParseError};

/// A candidate point counts as feasible up to this residual.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub cone: ConeKind,
    pub rows: Vec<Expression>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub vars: Vec<String>,
    pub objective: Expression,
    pub blocks: Vec<Block>,
    pub point: Option<DVector<f64>>,
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: {source}")]
    Expr { line: usize, source: ParseError },
    #[error("line {line}: block declares dimension {declared} but has {found} rows")]
    DimensionMismatch { line: usize, declared: usize, found: usize },
    #[error("line {line}: duplicate `{section}` section")]
    DuplicateSection { line: usize, section: String },
    #[error("missing `{0}` section")]
    MissingSection(&'static str),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("point has length {found}, problem has {expected} variables")]
    PointLength { expected: usize, found: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cone(#[from] ConeError),
}

/// Derivative data of one constraint block at a point.
#[derive(Debug, Clone)]
pub struct BlockData {
    pub cone: ConeKind,
    /// Offset of the block's first row in the stacked constraint vector.
    pub offset: usize,
    pub value: DVector<f64>,
    /// Rows are the gradients of the block's components.
    pub jacobian: DMatrix<f64>,
    pub hessians: Vec<DMatrix<f64>>,
    pub residual: f64,
    /// `None` when the value is outside the cone beyond tolerance.
    pub reduction: Option<Reduction>,
}

#[derive(Debug, Clone)]
pub struct PointData {
    pub x: DVector<f64>,
    pub objective: EvalBundle,
    pub blocks: Vec<BlockData>,
    /// Euclidean distance of q(x) to Theta.
    pub residual: f64,
}

impl PointData {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn m(&self) -> usize {
        self.blocks.iter().map(|b| b.cone.dim()).sum()
    }

    /// Stacked constraint Jacobian (m x n).
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.m(), self.n());
        for b in &self.blocks {
            j.rows_mut(b.offset, b.cone.dim()).copy_from(&b.jacobian);
        }
        j
    }

    pub fn constraint_hessians(&self) -> Vec<&DMatrix<f64>> {
        self.blocks.iter().flat_map(|b| b.hessians.iter()).collect()
    }

    /// Indices (in the stacked vector) of active orthant rows.
    pub fn active_orthant_rows(&self) -> Vec<usize> {
        let mut out = vec![];
        for b in &self.blocks {
            if let Some(Reduction::Affine { active }) = &b.reduction {
                out.extend(active.iter().map(|i| b.offset + i));
            }
        }
        out
    }

    pub fn has_soc(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.cone, ConeKind::Soc(_)))
    }

    /// A copy with every SOC-boundary reduction map scaled by `factor`.
    pub fn with_scaled_reductions(&self, factor: f64) -> PointData {
        let mut pd = self.clone();
        for b in &mut pd.blocks {
            b.reduction = b.reduction.as_ref().map(|r| r.scaled(factor));
        }
        pd
    }
}

impl Problem {
    pub fn n(&self) -> usize {
        self.vars.len()
    }

    pub fn m(&self) -> usize {
        self.blocks.iter().map(|b| b.cone.dim()).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Problem, ProblemError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProblemError::Io { path: path.display().to_string(), source })?;
        Problem::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Problem, ProblemError> {
        #[derive(PartialEq, PartialOrd)]
        enum Stage {
            Start,
            Vars,
            Objective,
            Blocks,
            Point,
        }
        let mut stage = Stage::Start;
        let mut vars: Vec<String> = vec![];
        let mut objective = None;
        let mut blocks: Vec<Block> = vec![];
        let mut point = None;
        // (header line, kind, declared dim, rows so far)
        let mut open: Option<(usize, ConeKind, Vec<Expression>)> = None;

        let close = |open: &mut Option<(usize, ConeKind, Vec<Expression>)>, blocks: &mut Vec<Block>| {
            if let Some((line, cone, rows)) = open.take() {
                if rows.len() != cone.dim() {
                    return Err(ProblemError::DimensionMismatch { line, declared: cone.dim(), found: rows.len() });
                }
                blocks.push(Block { cone, rows });
            }
            Ok(())
        };

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, rest) = match trimmed.split_once(':') {
                Some((k, r)) => (k.trim(), r.trim()),
                None => {
                    return Err(ProblemError::Format { line, message: format!("expected `key: value`, found `{trimmed}`") })
                }
            };
            let fmt_err = |message: String| ProblemError::Format { line, message };

            if key == "row" {
                let Some((_, _, rows)) = open.as_mut() else {
                    return Err(fmt_err("`row` outside of a block".into()));
                };
                if !content.starts_with(char::is_whitespace) {
                    return Err(fmt_err("block rows must be indented".into()));
                }
                let e = expr::parse(rest, &vars).map_err(|source| ProblemError::Expr { line, source })?;
                rows.push(e);
                continue;
            }
            close(&mut open, &mut blocks)?;

            let section = key.split_whitespace().next().unwrap_or("");
            match section {
                "vars" => {
                    if stage >= Stage::Vars {
                        return Err(ProblemError::DuplicateSection { line, section: "vars".into() });
                    }
                    stage = Stage::Vars;
                    vars = rest.split_whitespace().map(str::to_string).collect();
                    if vars.is_empty() {
                        return Err(fmt_err("no variables declared".into()));
                    }
                    for (j, v) in vars.iter().enumerate() {
                        let valid = v.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                            && v.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
                        if !valid || ["sqrt", "exp", "log", "sin", "cos"].contains(&v.as_str()) {
                            return Err(fmt_err(format!("invalid variable name `{v}`")));
                        }
                        if vars[..j].contains(v) {
                            return Err(fmt_err(format!("variable `{v}` declared twice")));
                        }
                    }
                }
                "objective" => {
                    if stage >= Stage::Objective {
                        return Err(ProblemError::DuplicateSection { line, section: "objective".into() });
                    }
                    if stage < Stage::Vars {
                        return Err(fmt_err("`objective` before `vars`".into()));
                    }
                    stage = Stage::Objective;
                    objective = Some(expr::parse(rest, &vars).map_err(|source| ProblemError::Expr { line, source })?);
                }
                "block" => {
                    if stage < Stage::Objective {
                        return Err(fmt_err("`block` before `objective`".into()));
                    }
                    if stage > Stage::Blocks {
                        return Err(fmt_err("`block` after `point`".into()));
                    }
                    stage = Stage::Blocks;
                    if !rest.is_empty() {
                        return Err(fmt_err("block header must end with `:`".into()));
                    }
                    let words: Vec<&str> = key.split_whitespace().collect();
                    if words.len() != 3 {
                        return Err(fmt_err("expected `block <orthant|soc> <m>:`".into()));
                    }
                    let m: usize = words[2].parse().map_err(|_| fmt_err(format!("bad block dimension `{}`", words[2])))?;
                    let cone = match words[1] {
                        "orthant" => ConeKind::Orthant(m),
                        "soc" => ConeKind::Soc(m),
                        other => return Err(fmt_err(format!("unknown cone `{other}`"))),
                    };
                    cone.validate().map_err(|e| fmt_err(e.to_string()))?;
                    open = Some((line, cone, vec![]));
                }
                "point" => {
                    if stage >= Stage::Point {
                        return Err(ProblemError::DuplicateSection { line, section: "point".into() });
                    }
                    if stage < Stage::Objective {
                        return Err(fmt_err("`point` before `objective`".into()));
                    }
                    stage = Stage::Point;
                    let vals: Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse::<f64>).collect();
                    let vals = vals.map_err(|_| fmt_err("point must be a list of reals".into()))?;
                    if vals.len() != vars.len() {
                        return Err(ProblemError::PointLength { expected: vars.len(), found: vals.len() });
                    }
                    point = Some(DVector::from_vec(vals));
                }
                other => return Err(fmt_err(format!("unknown section `{other}`"))),
            }
        }
        close(&mut open, &mut blocks)?;
        if vars.is_empty() {
            return Err(ProblemError::MissingSection("vars"));
        }
        let objective = objective.ok_or(ProblemError::MissingSection("objective"))?;
        Ok(Problem { vars, objective, blocks, point })
    }

    /// Canonical text form; `parse(save(p))` evaluates identically to `p`.
    pub fn save(&self) -> String {
        let mut out = format!("vars: {}\n", self.vars.join(" "));
        out.push_str(&format!("objective: {}\n", self.objective.render(&self.vars)));
        for b in &self.blocks {
            out.push_str(&format!("block {} {}:\n", b.cone.keyword(), b.cone.dim()));
            for r in &b.rows {
                out.push_str(&format!("  row: {}\n", r.render(&self.vars)));
            }
        }
        if let Some(p) = &self.point {
            let vals: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!("point: {}\n", vals.join(" ")));
        }
        out
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.save().as_bytes());
        h.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn require_point(&self) -> Result<&DVector<f64>, ProblemError> {
        self.point.as_ref().ok_or(ProblemError::MissingSection("point"))
    }

    pub fn objective_value(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.objective.value(x)
    }

    /// Constraint values, block by block.
    pub fn constraint_values(&self, x: &[f64]) -> Result<Vec<DVector<f64>>, EvalError> {
        self.blocks
            .iter()
            .map(|b| {
                let v: Result<Vec<f64>, _> = b.rows.iter().map(|r| r.value(x)).collect();
                v.map(DVector::from_vec)
            })
            .collect()
    }

    /// Euclidean distance of q(x) to Theta.
    pub fn residual(&self, x: &[f64]) -> Result<f64, EvalError> {
        let vals = self.constraint_values(x)?;
        Ok(self
            .blocks
            .iter()
            .zip(vals.iter())
            .map(|(b, v)| cones::distance(b.cone, v).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<PointData, ProblemError> {
        if x.len() != self.n() {
            return Err(ProblemError::PointLength { expected: self.n(), found: x.len() });
        }
        let xs = x.as_slice();
        let objective = self.objective.eval_bundle(xs)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut offset = 0;
        let mut total = 0.0;
        for b in &self.blocks {
            let m = b.cone.dim();
            let mut value = DVector::zeros(m);
            let mut jacobian = DMatrix::zeros(m, self.n());
            let mut hessians = Vec::with_capacity(m);
            for (i, r) in b.rows.iter().enumerate() {
                let eb = r.eval_bundle(xs)?;
                value[i] = eb.value;
                jacobian.row_mut(i).copy_from(&eb.gradient.transpose());
                hessians.push(eb.hessian);
            }
            let residual = cones::distance(b.cone, &value);
            total += residual * residual;
            let reduction = if residual <= FEASIBILITY_TOL { cones::reduction_at(b.cone, &value).ok() } else { None };
            blocks.push(BlockData { cone: b.cone, offset, value, jacobian, hessians, residual, reduction });
            offset += m;
        }
        Ok(PointData { x: x.clone(), objective, blocks, residual: total.sqrt() })
    }

    /// The same problem with `(rho/2)|x - center|^2` added to the objective.
    pub fn regularized(&self, rho: f64, center: &DVector<f64>) -> Problem {
        use expr::{BinaryOp, Node};
        let mut root = self.objective.root().clone();
        for (i, &c) in center.iter().enumerate() {
            let diff = Node::Binary(BinaryOp::Sub, Box::new(Node::Var(i)), Box::new(Node::Const(c)));
            let sq = Node::Binary(
                BinaryOp::Mul,
                Box::new(Node::Const(0.5 * rho)),
                Box::new(Node::Pow(Box::new(diff), 2)),
            );
            root = Node::Binary(BinaryOp::Add, Box::new(root), Box::new(sq));
        }
        let mut p = self.clone();
        p.objective = Expression::new(root, self.n()).expect("same variables");
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOC_VERTEX: &str = "\
vars: x1 x2 x3
objective: 0.5*x1^2 + x2^2
block soc 3:
  row: 2*x2^2
  row: x2^2 - x3
  row: x2^2 + x3
point: 0 0 0
";

    const NO_MFCQ_CRCQ: &str = "\
# three quadratic inequalities
vars: x1 x2 x3
objective: -x1 + 0.5*x2^2 + 0.5*x3^2
block orthant 3:
  row: x1 - 0.5*x2^2
  row: x1 - 0.5*x3^2
  row: -x1 - 0.5*x2^2 - 0.5*x3^2   # q3
point: 0 0 0
";

    #[test]
    fn loads_soc_example() {
        let p = Problem::parse(SOC_VERTEX).unwrap();
        assert_eq!(p.n(), 3);
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].cone, ConeKind::Soc(3));
        let pd = p.evaluate(p.point.as_ref().unwrap()).unwrap();
        assert_eq!(pd.blocks[0].value, DVector::zeros(3));
        let j = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pd.jacobian(), j);
        assert_eq!(pd.blocks[0].reduction, Some(Reduction::SocVertex));
    }

    #[test]
    fn loads_orthant_example() {
        let p = Problem::parse(NO_MFCQ_CRCQ).unwrap();
        assert_eq!(p.blocks[0].cone, ConeKind::Orthant(3));
        let pd = p.evaluate(&DVector::zeros(3)).unwrap();
        assert_eq!(pd.active_orthant_rows(), vec![0, 1, 2]);
    }

    #[test]
    fn mfcq_example_gradients() {
        let p = Problem::parse(
            "vars: x1 x2 x3\nobjective: -x1 + 0.5*x2^2\nblock orthant 2:\n  row: x1 - x2^4 + x3^2\n  row: x1\npoint: 0 0 0\n",
        )
        .unwrap();
        let pd = p.evaluate(&DVector::zeros(3)).unwrap();
        assert_eq!(pd.jacobian(), DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        assert_eq!(pd.active_orthant_rows(), vec![0, 1]);
    }

    #[test]
    fn infeasible_point_records_residual() {
        let p = Problem::parse(NO_MFCQ_CRCQ).unwrap();
        let pd = p.evaluate(&DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert!((pd.residual - 2f64.sqrt()).abs() < 1e-12);
        assert!(pd.blocks[0].reduction.is_none());
    }

    #[test]
    fn validation_errors() {
        let bad = "vars: x1 x2 x3\nobjective: x1\nblock soc 3:\n  row: x1\n  row: x2\npoint: 0 0 0\n";
        assert!(matches!(Problem::parse(bad), Err(ProblemError::DimensionMismatch { declared: 3, found: 2, .. })));
        let dup = "vars: x1\nobjective: x1\nobjective: x1\n";
        assert!(matches!(Problem::parse(dup), Err(ProblemError::DuplicateSection { .. })));
        let order = "vars: x1\nobjective: x1\npoint: 0\nblock orthant 1:\n  row: x1\n";
        assert!(matches!(Problem::parse(order), Err(ProblemError::Format { .. })));
        let unindented = "vars: x1\nobjective: x1\nblock orthant 1:\nrow: x1\n";
        assert!(matches!(Problem::parse(unindented), Err(ProblemError::Format { .. })));
        let unknown = "vars: x1\nobjective: y\n";
        assert!(matches!(Problem::parse(unknown), Err(ProblemError::Expr { line: 2, .. })));
        assert!(matches!(Problem::parse("vars: x1\n"), Err(ProblemError::MissingSection("objective"))));
        let soc1 = "vars: x1\nobjective: x1\nblock soc 1:\n  row: x1\n";
        assert!(Problem::parse(soc1).is_err());
    }

    #[test]
    fn save_round_trip() {
        let p = Problem::parse(NO_MFCQ_CRCQ).unwrap();
        let q = Problem::parse(&p.save()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());
    }
}
