//! Structured 1D/2D grids, nodal fields, and the discrete operator
//! `u -> div(gamma grad u)` with Dirichlet solves and conormal fluxes.
//!
//! Grids are either full rectangles (every array node is in the domain) or a
//! masked square carrying a disk. In both cases a node is *interior* when all
//! of its axis neighbours are in the domain, and *boundary* otherwise. Boundary
//! nodes are split into the accessible part (Sigma) and the inaccessible part
//! (Gamma).

use std::io::{self, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Geometry {
    Interval,
    Rectangle,
    /// Square array masked to `|x - center| <= radius`.
    Disk { center: [f64; 2], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeRole {
    Interior,
    Boundary,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundaryLabel {
    /// Accessible boundary.
    Sigma,
    /// Inaccessible boundary.
    Gamma,
}

/// Which boundary nodes a trace is supported on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Subset {
    All,
    Sigma,
    Gamma,
}

impl Subset {
    fn admits(self, label: BoundaryLabel) -> bool {
        match self {
            Subset::All => true,
            Subset::Sigma => label == BoundaryLabel::Sigma,
            Subset::Gamma => label == BoundaryLabel::Gamma,
        }
    }
}

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<S> {
    dim: usize,
    shape: [usize; 2],
    spacing: [S; 2],
    origin: [S; 2],
    geometry: Geometry,
    roles: Vec<NodeRole>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    /// Position of a node inside `interior` or `boundary`; `NONE` when outside.
    slot: Vec<usize>,
    labels: Vec<BoundaryLabel>,
}

impl<S: Real> Grid<S> {
    /// `n` nodes on `[a, b]`.
    pub fn interval_on(n: usize, a: S, b: S) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 nodes, got {n}")));
        }
        if !(b > a) {
            return Err(Error::InvalidGrid("interval must have positive length".into()));
        }
        let s = (b - a) / S::from_usize_lossy(n - 1);
        Self::build(1, [n, 1], [s, S::one()], [a, S::zero()], Geometry::Interval, |_| true)
    }

    pub fn interval(n: usize, length: S) -> Result<Self> {
        Self::interval_on(n, S::zero(), length)
    }

    /// `nx x ny` nodes on `[x0, x1] x [y0, y1]`.
    pub fn rectangle(nx: usize, ny: usize, x: [S; 2], y: [S; 2]) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3x3 nodes, got {nx}x{ny}")));
        }
        if !(x[1] > x[0] && y[1] > y[0]) {
            return Err(Error::InvalidGrid("rectangle must have positive extents".into()));
        }
        let sx = (x[1] - x[0]) / S::from_usize_lossy(nx - 1);
        let sy = (y[1] - y[0]) / S::from_usize_lossy(ny - 1);
        Self::build(2, [nx, ny], [sx, sy], [x[0], y[0]], Geometry::Rectangle, |_| true)
    }

    pub fn unit_square(n: usize) -> Result<Self> {
        Self::rectangle(n, n, [S::zero(), S::one()], [S::zero(), S::one()])
    }

    /// Square array of `n x n` nodes on the bounding box of the disk, masked
    /// to the closed disk. Boundary nodes with no interior neighbour carry no
    /// information for the five-point stencil and are dropped from the domain.
    pub fn disk(n: usize, center: [S; 2], radius: S) -> Result<Self> {
        if n < 5 {
            return Err(Error::InvalidGrid(format!("disk grid needs at least 5 nodes per axis, got {n}")));
        }
        if !(radius > S::zero()) {
            return Err(Error::InvalidGrid("disk radius must be positive".into()));
        }
        let s = S::lit(2.0) * radius / S::from_usize_lossy(n - 1);
        let origin = [center[0] - radius, center[1] - radius];
        let tol = S::lit(1e-9) * radius;
        let geom = Geometry::Disk { center: [center[0].f64(), center[1].f64()], radius: radius.f64() };
        let inside = |x: [S; 2]| {
            let dx = x[0] - center[0];
            let dy = x[1] - center[1];
            (dx * dx + dy * dy).sqrt() <= radius + tol
        };
        let mut g = Self::build(2, [n, n], [s, s], origin, geom, inside)?;
        // prune boundary nodes that touch no interior node
        let mut changed = false;
        for node in 0..g.node_count() {
            if g.roles[node] == NodeRole::Boundary {
                let touches = g.axis_neighbors(node).into_iter().flatten().any(|nb| g.roles[nb] == NodeRole::Interior);
                if !touches {
                    g.roles[node] = NodeRole::Outside;
                    changed = true;
                }
            }
        }
        if changed {
            g.reindex();
        }
        Ok(g)
    }

    fn build(
        dim: usize,
        shape: [usize; 2],
        spacing: [S; 2],
        origin: [S; 2],
        geometry: Geometry,
        in_domain: impl Fn([S; 2]) -> bool,
    ) -> Result<Self> {
        if spacing.iter().take(dim).any(|s| !(*s > S::zero())) {
            return Err(Error::InvalidGrid("spacing must be positive".into()));
        }
        let count = shape[0] * shape[1];
        let mut g = Grid {
            dim,
            shape,
            spacing,
            origin,
            geometry,
            roles: vec![NodeRole::Outside; count],
            interior: Vec::new(),
            boundary: Vec::new(),
            slot: vec![NONE; count],
            labels: Vec::new(),
        };
        let mask: Vec<bool> = (0..count).map(|node| in_domain(g.coord(node))).collect();
        for node in 0..count {
            if !mask[node] {
                continue;
            }
            let full = (0..dim).all(|axis| {
                [-1isize, 1].iter().all(|&dir| g.neighbor(node, axis, dir).map(|k| mask[k]).unwrap_or(false))
            });
            g.roles[node] = if full { NodeRole::Interior } else { NodeRole::Boundary };
        }
        g.reindex();
        if g.interior.is_empty() {
            return Err(Error::InvalidGrid("grid has no interior nodes".into()));
        }
        Ok(g)
    }

    fn reindex(&mut self) {
        self.interior.clear();
        self.boundary.clear();
        for node in 0..self.roles.len() {
            match self.roles[node] {
                NodeRole::Interior => {
                    self.slot[node] = self.interior.len();
                    self.interior.push(node);
                }
                NodeRole::Boundary => {
                    self.slot[node] = self.boundary.len();
                    self.boundary.push(node);
                }
                NodeRole::Outside => self.slot[node] = NONE,
            }
        }
        self.labels = vec![BoundaryLabel::Sigma; self.boundary.len()];
    }

    /// Relabels boundary nodes: those where `is_gamma` holds become Gamma,
    /// the rest Sigma. Sigma must stay nonempty.
    pub fn with_gamma(mut self, is_gamma: impl Fn([S; 2]) -> bool) -> Result<Self> {
        for (k, &node) in self.boundary.iter().enumerate() {
            self.labels[k] = if is_gamma(self.coord(node)) { BoundaryLabel::Gamma } else { BoundaryLabel::Sigma };
        }
        if !self.labels.contains(&BoundaryLabel::Sigma) {
            return Err(Error::InvalidGrid("accessible boundary part is empty".into()));
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }
    pub fn spacing(&self) -> [S; 2] {
        self.spacing
    }
    pub fn geometry(&self) -> Geometry {
        self.geometry
    }
    pub fn node_count(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }
    pub fn role(&self, node: usize) -> NodeRole {
        self.roles[node]
    }
    pub fn is_in_domain(&self, node: usize) -> bool {
        self.roles[node] != NodeRole::Outside
    }
    pub fn boundary_labels(&self) -> &[BoundaryLabel] {
        &self.labels
    }
    /// Index of an interior node among the unknowns, or of a boundary node
    /// among the boundary nodes.
    pub fn slot(&self, node: usize) -> Option<usize> {
        (self.slot[node] != NONE).then_some(self.slot[node])
    }

    pub fn cell_volume(&self) -> S {
        self.spacing.iter().take(self.dim).fold(S::one(), |acc, &s| acc * s)
    }

    pub fn coord(&self, node: usize) -> [S; 2] {
        let i = node % self.shape[0];
        let j = node / self.shape[0];
        let x = self.origin[0] + S::from_usize_lossy(i) * self.spacing[0];
        if self.dim == 1 {
            [x, S::zero()]
        } else {
            [x, self.origin[1] + S::from_usize_lossy(j) * self.spacing[1]]
        }
    }

    /// Array neighbour of `node` along `axis` in direction `dir` (+1/-1).
    pub fn neighbor(&self, node: usize, axis: usize, dir: isize) -> Option<usize> {
        let idx = [node % self.shape[0], node / self.shape[0]];
        if axis >= self.dim {
            return None;
        }
        let k = idx[axis] as isize + dir;
        if k < 0 || k >= self.shape[axis] as isize {
            return None;
        }
        let mut out = idx;
        out[axis] = k as usize;
        Some(out[0] + self.shape[0] * out[1])
    }

    /// `[-x, +x, -y, +y]` neighbours (the y entries are `None` in 1D).
    pub fn axis_neighbors(&self, node: usize) -> [Option<usize>; 4] {
        [
            self.neighbor(node, 0, -1),
            self.neighbor(node, 0, 1),
            self.neighbor(node, 1, -1),
            self.neighbor(node, 1, 1),
        ]
    }

    fn in_domain_neighbor(&self, node: usize, axis: usize, dir: isize) -> Option<usize> {
        self.neighbor(node, axis, dir).filter(|&nb| self.is_in_domain(nb))
    }

    /// Nodal quadrature weights: tensor trapezoid on rectangles and
    /// intervals; cell volume on interior and half of it on boundary nodes of
    /// masked grids. Outside nodes weigh zero.
    pub fn node_weights(&self) -> Vec<S> {
        let half = S::lit(0.5);
        match self.geometry {
            Geometry::Interval | Geometry::Rectangle => (0..self.node_count())
                .map(|node| {
                    let idx = [node % self.shape[0], node / self.shape[0]];
                    let mut w = S::one();
                    for a in 0..self.dim {
                        let edge = idx[a] == 0 || idx[a] + 1 == self.shape[a];
                        w *= if edge { half * self.spacing[a] } else { self.spacing[a] };
                    }
                    w
                })
                .collect(),
            Geometry::Disk { .. } => {
                let vol = self.cell_volume();
                self.roles
                    .iter()
                    .map(|r| match r {
                        NodeRole::Interior => vol,
                        NodeRole::Boundary => half * vol,
                        NodeRole::Outside => S::zero(),
                    })
                    .collect()
            }
        }
    }

    /// Surface quadrature weights, one per boundary node. Intervals: 1 at each
    /// end. Rectangles: spacing along the edge (corners included, whose flux
    /// is the mean of the two edge fluxes). Masked grids: one spacing per node.
    pub fn boundary_weights(&self) -> Vec<S> {
        match self.geometry {
            Geometry::Interval => vec![S::one(); self.boundary.len()],
            Geometry::Rectangle => self
                .boundary
                .iter()
                .map(|&node| {
                    let idx = [node % self.shape[0], node / self.shape[0]];
                    let on_x = idx[0] == 0 || idx[0] + 1 == self.shape[0];
                    let on_y = idx[1] == 0 || idx[1] + 1 == self.shape[1];
                    match (on_x, on_y) {
                        (true, true) => (self.spacing[0] + self.spacing[1]) * S::lit(0.5),
                        (true, false) => self.spacing[1],
                        _ => self.spacing[0],
                    }
                })
                .collect(),
            Geometry::Disk { .. } => vec![self.spacing[0]; self.boundary.len()],
        }
    }

    /// Structural equality check used to detect mixed-grid operations.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || **self == **other
    }
}

pub(crate) fn check_same<S: Real>(a: &Arc<Grid<S>>, b: &Arc<Grid<S>>) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// One real value per grid node. Outside nodes of masked grids hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<S> {
    grid: Arc<Grid<S>>,
    values: Vec<S>,
}

impl<S: Real> ScalarField<S> {
    pub fn new(grid: Arc<Grid<S>>, values: Vec<S>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::InvalidData(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite value at node {k}")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Arc<Grid<S>>, values: Vec<S>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn zeros(grid: &Arc<Grid<S>>) -> Self {
        Self::constant(grid, S::zero())
    }

    /// Constant on in-domain nodes.
    pub fn constant(grid: &Arc<Grid<S>>, c: S) -> Self {
        Self::from_fn(grid, |_| c)
    }

    pub fn from_fn(grid: &Arc<Grid<S>>, f: impl Fn([S; 2]) -> S) -> Self {
        let values = (0..grid.node_count())
            .map(|n| if grid.is_in_domain(n) { f(grid.coord(n)) } else { S::zero() })
            .collect();
        Self { grid: grid.clone(), values }
    }

    pub fn grid(&self) -> &Arc<Grid<S>> {
        &self.grid
    }
    pub fn values(&self) -> &[S] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<S> {
        self.values
    }
    pub fn get(&self, node: usize) -> S {
        self.values[node]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(n, &v)| if self.grid.is_in_domain(n) { f(v) } else { S::zero() })
            .collect();
        Self { grid: self.grid.clone(), values }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        check_same(&self.grid, &other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(n, (&a, &b))| if self.grid.is_in_domain(n) { f(a, b) } else { S::zero() })
            .collect();
        Ok(Self { grid: self.grid.clone(), values })
    }

    pub fn scaled(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn domain_values(&self) -> impl Iterator<Item = S> + '_ {
        self.values.iter().enumerate().filter(|(n, _)| self.grid.is_in_domain(*n)).map(|(_, &v)| v)
    }

    pub fn max(&self) -> S {
        self.domain_values().fold(S::neg_infinity(), S::max)
    }
    pub fn min(&self) -> S {
        self.domain_values().fold(S::infinity(), S::min)
    }
    pub fn max_abs(&self) -> S {
        self.domain_values().fold(S::zero(), |a, v| a.max(v.abs()))
    }
    pub fn max_abs_interior(&self) -> S {
        self.grid.interior_nodes().iter().fold(S::zero(), |a, &n| a.max(self.values[n].abs()))
    }

    /// Nodal-quadrature integral over the domain.
    pub fn integral(&self) -> S {
        self.grid.node_weights().iter().zip(&self.values).fold(S::zero(), |acc, (&w, &v)| acc + w * v)
    }

    /// `int self * other` with nodal quadrature.
    pub fn inner(&self, other: &Self) -> Result<S> {
        check_same(&self.grid, &other.grid)?;
        let w = self.grid.node_weights();
        Ok(w.iter().zip(&self.values).zip(&other.values).fold(S::zero(), |acc, ((&w, &a), &b)| acc + w * a * b))
    }

    pub fn l2_norm(&self) -> S {
        self.inner(self).map(|v| v.sqrt()).unwrap_or(S::nan())
    }

    pub fn l1_norm(&self) -> S {
        self.grid.node_weights().iter().zip(&self.values).fold(S::zero(), |acc, (&w, &v)| acc + w * v.abs())
    }

    /// Restriction to the boundary nodes.
    pub fn trace(&self) -> BoundaryTrace<S> {
        let values = self.grid.boundary_nodes().iter().map(|&n| self.values[n]).collect();
        BoundaryTrace { grid: self.grid.clone(), values, subset: Subset::All }
    }

    /// CSV with columns `node,x[,y],value` over in-domain nodes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let two_d = self.grid.dim() == 2;
        writeln!(w, "{}", if two_d { "node,x,y,value" } else { "node,x,value" })?;
        for n in 0..self.grid.node_count() {
            if !self.grid.is_in_domain(n) {
                continue;
            }
            let x = self.grid.coord(n);
            if two_d {
                writeln!(w, "{},{},{},{}", n, x[0], x[1], self.values[n])?;
            } else {
                writeln!(w, "{},{},{}", n, x[0], self.values[n])?;
            }
        }
        Ok(())
    }
}

/// One value per boundary node (in `Grid::boundary_nodes` order), supported
/// on a subset of the boundary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace<S> {
    grid: Arc<Grid<S>>,
    values: Vec<S>,
    subset: Subset,
}

impl<S: Real> BoundaryTrace<S> {
    pub fn new(grid: Arc<Grid<S>>, values: Vec<S>, subset: Subset) -> Result<Self> {
        if values.len() != grid.boundary_nodes().len() {
            return Err(Error::InvalidData(format!(
                "trace has {} values, grid has {} boundary nodes",
                values.len(),
                grid.boundary_nodes().len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite boundary value".into()));
        }
        let mut t = Self { grid, values, subset };
        t.enforce_support();
        Ok(t)
    }

    pub fn zeros(grid: &Arc<Grid<S>>) -> Self {
        Self { grid: grid.clone(), values: vec![S::zero(); grid.boundary_nodes().len()], subset: Subset::All }
    }

    pub fn from_fn(grid: &Arc<Grid<S>>, f: impl Fn([S; 2]) -> S) -> Self {
        let values = grid.boundary_nodes().iter().map(|&n| f(grid.coord(n))).collect();
        Self { grid: grid.clone(), values, subset: Subset::All }
    }

    fn enforce_support(&mut self) {
        for (v, &l) in self.values.iter_mut().zip(self.grid.boundary_labels()) {
            if !self.subset.admits(l) {
                *v = S::zero();
            }
        }
    }

    /// Zeroes values outside `subset`.
    pub fn restricted(&self, subset: Subset) -> Self {
        let mut t = Self { grid: self.grid.clone(), values: self.values.clone(), subset };
        t.enforce_support();
        t
    }

    pub fn grid(&self) -> &Arc<Grid<S>> {
        &self.grid
    }
    pub fn values(&self) -> &[S] {
        &self.values
    }
    pub fn subset(&self) -> Subset {
        self.subset
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let mut t = Self { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect(), subset: self.subset };
        t.enforce_support();
        t
    }

    pub fn scaled(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        check_same(&self.grid, &other.grid)?;
        Ok(Self {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            subset: Subset::All,
        })
    }

    pub fn max(&self) -> S {
        self.values.iter().fold(S::neg_infinity(), |a, &v| a.max(v))
    }
    pub fn min(&self) -> S {
        self.values.iter().fold(S::infinity(), |a, &v| a.min(v))
    }
    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |a, &v| a.max(v.abs()))
    }

    /// Surface-quadrature pairing with the trace of a field.
    pub fn pair_with(&self, field: &ScalarField<S>) -> Result<S> {
        check_same(&self.grid, field.grid())?;
        let w = self.grid.boundary_weights();
        Ok(self
            .grid
            .boundary_nodes()
            .iter()
            .zip(&self.values)
            .zip(&w)
            .fold(S::zero(), |acc, ((&n, &v), &w)| acc + w * v * field.get(n)))
    }

    /// Surface-quadrature L2 norm restricted to `subset`.
    pub fn l2_norm_on(&self, subset: Subset) -> S {
        let w = self.grid.boundary_weights();
        self.values
            .iter()
            .zip(&w)
            .zip(self.grid.boundary_labels())
            .filter(|(_, &l)| subset.admits(l))
            .fold(S::zero(), |acc, ((&v, &w), _)| acc + w * v * v)
            .sqrt()
    }

    /// CSV with columns `node,x[,y],label,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let two_d = self.grid.dim() == 2;
        writeln!(w, "{}", if two_d { "node,x,y,label,value" } else { "node,x,label,value" })?;
        for ((&n, &v), &l) in self.grid.boundary_nodes().iter().zip(&self.values).zip(self.grid.boundary_labels()) {
            let x = self.grid.coord(n);
            let label = match l {
                BoundaryLabel::Sigma => "sigma",
                BoundaryLabel::Gamma => "gamma",
            };
            if two_d {
                writeln!(w, "{},{},{},{},{}", n, x[0], x[1], label, v)?;
            } else {
                writeln!(w, "{},{},{},{}", n, x[0], label, v)?;
            }
        }
        Ok(())
    }
}

/// Stopping rule for the preconditioned conjugate gradient solver.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative residual `|b - Ax| / |b|`.
    pub rel_tol: f64,
    /// Defaults to `10 * unknowns + 100`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_iter: None }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

#[derive(Debug, Clone, Copy)]
struct Link<S> {
    node: usize,
    coef: S,
}

/// Assembled `div(gamma grad .)` on the interior nodes of a grid, with
/// harmonic averaging of `gamma` on cell faces.
#[derive(Debug, Clone)]
pub struct EllipticOperator<S> {
    grid: Arc<Grid<S>>,
    gamma: ScalarField<S>,
    start: Vec<usize>,
    links: Vec<Link<S>>,
    diag: Vec<S>,
}

pub(crate) fn check_positive<S: Real>(field: &ScalarField<S>, name: &'static str) -> Result<()> {
    let g = field.grid();
    for n in 0..g.node_count() {
        if g.is_in_domain(n) && !(field.get(n) > S::zero()) {
            return Err(Error::NonPositiveCoefficient { name, node: n, value: field.get(n).f64() });
        }
    }
    Ok(())
}

impl<S: Real> EllipticOperator<S> {
    pub fn new(gamma: &ScalarField<S>) -> Result<Self> {
        check_positive(gamma, "gamma")?;
        let grid = gamma.grid().clone();
        let two = S::lit(2.0);
        let mut start = Vec::with_capacity(grid.interior_nodes().len() + 1);
        let mut links = Vec::with_capacity(4 * grid.interior_nodes().len());
        let mut diag = Vec::with_capacity(grid.interior_nodes().len());
        for &node in grid.interior_nodes() {
            start.push(links.len());
            let mut d = S::zero();
            let g0 = gamma.get(node);
            for axis in 0..grid.dim() {
                let inv_s2 = (grid.spacing()[axis] * grid.spacing()[axis]).recip();
                for dir in [-1isize, 1] {
                    let nb = grid.neighbor(node, axis, dir).expect("interior node has full stencil");
                    let g1 = gamma.get(nb);
                    let coef = two * g0 * g1 / (g0 + g1) * inv_s2;
                    d += coef;
                    links.push(Link { node: nb, coef });
                }
            }
            diag.push(d);
        }
        start.push(links.len());
        Ok(Self { grid, gamma: gamma.clone(), start, links, diag })
    }

    pub fn grid(&self) -> &Arc<Grid<S>> {
        &self.grid
    }
    pub fn gamma(&self) -> &ScalarField<S> {
        &self.gamma
    }
    pub fn unknowns(&self) -> usize {
        self.diag.len()
    }

    /// `div(gamma grad u)` evaluated from full nodal values at interior unknown `i`.
    #[inline]
    pub fn apply_at(&self, i: usize, u: &[S]) -> S {
        let node = self.grid.interior_nodes()[i];
        let u0 = u[node];
        self.links[self.start[i]..self.start[i + 1]].iter().fold(S::zero(), |acc, l| acc + l.coef * (u[l.node] - u0))
    }

    /// Sum of absolute contributions at unknown `i`, a scale for residuals.
    pub fn abs_apply_at(&self, i: usize, u: &[S]) -> S {
        let node = self.grid.interior_nodes()[i];
        let u0 = u[node];
        self.links[self.start[i]..self.start[i + 1]]
            .iter()
            .fold(S::zero(), |acc, l| acc + l.coef * (u[l.node].abs() + u0.abs()))
    }

    /// Full field with `div(gamma grad u)` at interior nodes and 0 elsewhere.
    pub fn apply(&self, u: &ScalarField<S>) -> Result<ScalarField<S>> {
        check_same(&self.grid, u.grid())?;
        let mut out = vec![S::zero(); self.grid.node_count()];
        for (i, &node) in self.grid.interior_nodes().iter().enumerate() {
            out[node] = self.apply_at(i, u.values());
        }
        Ok(ScalarField::from_vec_unchecked(self.grid.clone(), out))
    }

    /// `(reaction + A) x` where `A = -div(gamma grad)` acts on interior
    /// unknowns with zero boundary values.
    fn spd_apply(&self, reaction: Option<&[S]>, x: &[S], out: &mut [S]) {
        let slot = &self.grid.slot;
        for i in 0..self.diag.len() {
            let mut acc = self.diag[i] * x[i];
            for l in &self.links[self.start[i]..self.start[i + 1]] {
                if self.grid.roles[l.node] == NodeRole::Interior {
                    acc -= l.coef * x[slot[l.node]];
                }
            }
            if let Some(r) = reaction {
                acc += r[i] * x[i];
            }
            out[i] = acc;
        }
    }

    /// Contribution of known boundary values to the right-hand side of the
    /// SPD system: `sum coef * g` over boundary neighbours.
    pub fn boundary_coupling(&self, full: &[S]) -> Vec<S> {
        (0..self.diag.len())
            .map(|i| {
                self.links[self.start[i]..self.start[i + 1]]
                    .iter()
                    .filter(|l| self.grid.roles[l.node] == NodeRole::Boundary)
                    .fold(S::zero(), |acc, l| acc + l.coef * full[l.node])
            })
            .collect()
    }

    /// Solves `(reaction + A) x = b` on the interior unknowns by Jacobi
    /// preconditioned conjugate gradients. `reaction` must be nonnegative.
    pub fn solve_spd(&self, reaction: Option<&[S]>, b: &[S], x0: Option<&[S]>, opts: &SolverOptions) -> Result<(Vec<S>, SolveStats)> {
        let n = self.diag.len();
        let tol = S::tol(opts.rel_tol);
        let max_iter = opts.max_iter.unwrap_or(10 * n + 100);
        let dot = |a: &[S], b: &[S]| a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        let bnorm = dot(b, b).sqrt();
        if bnorm == S::zero() {
            return Ok((vec![S::zero(); n], SolveStats::default()));
        }
        let precond: Vec<S> = (0..n).map(|i| (self.diag[i] + reaction.map(|r| r[i]).unwrap_or(S::zero())).recip()).collect();
        let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![S::zero(); n]);
        let mut r = vec![S::zero(); n];
        self.spd_apply(reaction, &x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let mut z: Vec<S> = r.iter().zip(&precond).map(|(&r, &p)| r * p).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![S::zero(); n];
        let mut rel = dot(&r, &r).sqrt() / bnorm;
        let mut it = 0;
        while rel > tol {
            if it >= max_iter {
                return Err(Error::NoConvergence { iterations: it, residual: rel.f64() });
            }
            self.spd_apply(reaction, &p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > S::zero()) {
                return Err(Error::NoConvergence { iterations: it, residual: rel.f64() });
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] * precond[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            rel = dot(&r, &r).sqrt() / bnorm;
            it += 1;
        }
        Ok((x, SolveStats { iterations: it, rel_residual: rel.f64() }))
    }

    /// Solves `div(gamma grad U) = rhs` at interior nodes with `U = dirichlet`
    /// on the boundary.
    pub fn solve(&self, rhs: &ScalarField<S>, dirichlet: &BoundaryTrace<S>, opts: &SolverOptions) -> Result<ScalarField<S>> {
        check_same(&self.grid, rhs.grid())?;
        check_same(&self.grid, dirichlet.grid())?;
        let mut full = vec![S::zero(); self.grid.node_count()];
        for (&n, &v) in self.grid.boundary_nodes().iter().zip(dirichlet.values()) {
            full[n] = v;
        }
        let coupling = self.boundary_coupling(&full);
        let b: Vec<S> = self.grid.interior_nodes().iter().zip(&coupling).map(|(&n, &c)| c - rhs.get(n)).collect();
        let (x, _) = self.solve_spd(None, &b, None, opts)?;
        for (&n, &v) in self.grid.interior_nodes().iter().zip(&x) {
            full[n] = v;
        }
        Ok(ScalarField::from_vec_unchecked(self.grid.clone(), full))
    }
}

/// Discrete `div(gamma grad field)` at interior nodes, zero elsewhere.
pub fn div_gamma_grad<S: Real>(field: &ScalarField<S>, gamma: &ScalarField<S>) -> Result<ScalarField<S>> {
    check_same(field.grid(), gamma.grid())?;
    EllipticOperator::new(gamma)?.apply(field)
}

pub fn solve_elliptic<S: Real>(gamma: &ScalarField<S>, rhs: &ScalarField<S>, dirichlet: &BoundaryTrace<S>) -> Result<ScalarField<S>> {
    solve_elliptic_with(gamma, rhs, dirichlet, &SolverOptions::default())
}

pub fn solve_elliptic_with<S: Real>(
    gamma: &ScalarField<S>,
    rhs: &ScalarField<S>,
    dirichlet: &BoundaryTrace<S>,
    opts: &SolverOptions,
) -> Result<ScalarField<S>> {
    EllipticOperator::new(gamma)?.solve(rhs, dirichlet, opts)
}

/// Outward conormal derivative `gamma d_nu field` at every boundary node.
///
/// Rectangles and intervals use the quadratic one-sided difference
/// `(3u0 - 4u1 + u2) / 2s` along each axis on which the node sits on the
/// edge; at rectangle corners the two edge fluxes are averaged. On masked
/// grids the staircase has no reliable normal, so the first-order difference
/// towards each interior neighbour is averaged instead.
pub fn boundary_flux<S: Real>(field: &ScalarField<S>, gamma: &ScalarField<S>) -> Result<BoundaryTrace<S>> {
    check_same(field.grid(), gamma.grid())?;
    let grid = field.grid();
    let u = field.values();
    let mut values = Vec::with_capacity(grid.boundary_nodes().len());
    for &node in grid.boundary_nodes() {
        let mut sum = S::zero();
        let mut count = 0usize;
        match grid.geometry() {
            Geometry::Interval | Geometry::Rectangle => {
                for axis in 0..grid.dim() {
                    for dir in [-1isize, 1] {
                        if grid.neighbor(node, axis, dir).is_some() {
                            continue;
                        }
                        // `dir` points outward; walk inward
                        let s = grid.spacing()[axis];
                        let d = match grid
                            .in_domain_neighbor(node, axis, -dir)
                            .map(|n1| (n1, grid.in_domain_neighbor(n1, axis, -dir)))
                        {
                            Some((n1, Some(n2))) => (S::lit(3.0) * u[node] - S::lit(4.0) * u[n1] + u[n2]) / (S::lit(2.0) * s),
                            Some((n1, None)) => (u[node] - u[n1]) / s,
                            None => continue,
                        };
                        sum += d;
                        count += 1;
                    }
                }
            }
            Geometry::Disk { .. } => {
                for axis in 0..grid.dim() {
                    for dir in [-1isize, 1] {
                        if let Some(nb) = grid.neighbor(node, axis, dir) {
                            if grid.role(nb) == NodeRole::Interior {
                                sum += (u[node] - u[nb]) / grid.spacing()[axis];
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        let flux = if count == 0 { S::zero() } else { gamma.get(node) * sum / S::from_usize_lossy(count) };
        values.push(flux);
    }
    Ok(BoundaryTrace { grid: grid.clone(), values, subset: Subset::All })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(n: usize) -> Arc<Grid<f64>> {
        Arc::new(Grid::interval(n, 1.0).unwrap())
    }

    #[test]
    fn second_difference_of_linear_and_quadratic() {
        let g = line(11);
        let one = ScalarField::constant(&g, 1.0);
        let lin = div_gamma_grad(&ScalarField::from_fn(&g, |x| x[0]), &one).unwrap();
        let quad = div_gamma_grad(&ScalarField::from_fn(&g, |x| x[0] * x[0]), &one).unwrap();
        for &n in g.interior_nodes() {
            assert_abs_diff_eq!(lin.get(n), 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(quad.get(n), 2.0, epsilon = 1e-9);
        }
        assert_eq!(quad.get(0), 0.0);
        assert_eq!(quad.get(10), 0.0);
    }

    #[test]
    fn variable_coefficient_divergence() {
        // d/dx((1 + x) * 1) = 1
        let g = line(41);
        let gamma = ScalarField::from_fn(&g, |x| 1.0 + x[0]);
        let out = div_gamma_grad(&ScalarField::from_fn(&g, |x| x[0]), &gamma).unwrap();
        for &n in g.interior_nodes() {
            assert_abs_diff_eq!(out.get(n), 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn rejects_bad_gamma_and_mismatch() {
        let g = line(5);
        let bad = ScalarField::from_fn(&g, |x| x[0] - 0.5);
        let f = ScalarField::zeros(&g);
        assert!(matches!(div_gamma_grad(&f, &bad), Err(Error::NonPositiveCoefficient { .. })));
        let other = ScalarField::zeros(&line(6));
        assert!(matches!(div_gamma_grad(&f, &other), Err(Error::GridMismatch)));
    }

    #[test]
    fn linear_dirichlet_data_is_reproduced() {
        let g = line(17);
        let one = ScalarField::constant(&g, 1.0);
        let bc = BoundaryTrace::from_fn(&g, |x| x[0]);
        let u = solve_elliptic(&one, &ScalarField::zeros(&g), &bc).unwrap();
        for n in 0..g.node_count() {
            assert_abs_diff_eq!(u.get(n), g.coord(n)[0], epsilon = 1e-10);
        }
    }

    #[test]
    fn harmonic_polynomial_on_square() {
        let g = Arc::new(Grid::<f64>::unit_square(21).unwrap());
        let one = ScalarField::constant(&g, 1.0);
        let exact = |x: [f64; 2]| x[0] * x[0] - x[1] * x[1];
        let bc = BoundaryTrace::from_fn(&g, exact);
        let u = solve_elliptic(&one, &ScalarField::zeros(&g), &bc).unwrap();
        for n in 0..g.node_count() {
            // the five-point stencil is exact on quadratics
            assert_abs_diff_eq!(u.get(n), exact(g.coord(n)), epsilon = 1e-8);
        }
    }

    #[test]
    fn flux_of_linear_and_constant_fields() {
        let g = line(9);
        let one = ScalarField::constant(&g, 1.0);
        let flux = boundary_flux(&ScalarField::from_fn(&g, |x| x[0]), &one).unwrap();
        assert_abs_diff_eq!(flux.values()[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(flux.values()[1], 1.0, epsilon = 1e-12);
        let flat = boundary_flux(&ScalarField::constant(&g, 3.5), &one).unwrap();
        assert!(flat.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn disk_grid_invariants() {
        let g = Grid::<f64>::disk(41, [-1.0, 0.0], 1.0).unwrap();
        for &n in g.interior_nodes() {
            for nb in g.axis_neighbors(n) {
                assert!(g.is_in_domain(nb.unwrap()));
            }
        }
        for &n in g.boundary_nodes() {
            assert!(g.axis_neighbors(n).iter().flatten().any(|&nb| g.role(nb) == NodeRole::Interior));
        }
        let g = g.with_gamma(|x| x[0] <= -0.2).unwrap();
        assert!(g.boundary_labels().contains(&BoundaryLabel::Gamma));
        assert!(g.clone().with_gamma(|_| true).is_err());
    }

    #[test]
    fn trace_support_is_enforced() {
        let g = Arc::new(Grid::<f64>::unit_square(5).unwrap().with_gamma(|x| x[0] < 0.5).unwrap());
        let t = BoundaryTrace::from_fn(&g, |_| 1.0).restricted(Subset::Sigma);
        for (v, l) in t.values().iter().zip(g.boundary_labels()) {
            assert_eq!(*v == 0.0, *l == BoundaryLabel::Gamma);
        }
    }

    #[test]
    fn single_precision_solve() {
        let g = Arc::new(Grid::<f32>::interval(33, 1.0).unwrap());
        let one = ScalarField::constant(&g, 1.0f32);
        let bc = BoundaryTrace::from_fn(&g, |x| 2.0 * x[0] + 1.0);
        let u = solve_elliptic(&one, &ScalarField::zeros(&g), &bc).unwrap();
        for n in 0..g.node_count() {
            assert!((u.get(n) - (2.0 * g.coord(n)[0] + 1.0)).abs() < 1e-4);
        }
    }
}
