//! Multi-session pose graph with odometry, loop-closure and prior factors.
//!
//! Residuals follow the relative-pose convention
//! `r = log(Z⁻¹ · Tᵢ⁻¹ · Tⱼ)` (binary) and `r = log(Z⁻¹ · T)` (prior), in
//! `[ω, ρ]` tangent ordering, whitened by the upper-triangular factor of the
//! information matrix. The solver is Levenberg–Marquardt on right
//! perturbations `T ← T · exp(δ)` with iteratively reweighted Huber kernels.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use thiserror::Error;

use crate::geometry::{se3_right_jacobian_inv, Pose, Twist};

pub mod g2o;

pub type NodeId = usize;

/// Huber threshold on whitened residual norms.
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGraphError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("edge references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("information matrix is not symmetric positive definite")]
    InvalidInformation,
    #[error("gauge underdetermined: {0}")]
    GaugeUnderdetermined(String),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("session-2 measurement references index {0} outside the trajectory")]
    IndexOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    /// Session tag, 1 or 2.
    pub session: u8,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    None,
    Huber(f64),
}

impl Kernel {
    pub fn default_for(kind: EdgeKind) -> Kernel {
        match kind {
            EdgeKind::Loop => Kernel::Huber(DEFAULT_HUBER_DELTA),
            EdgeKind::Odometry | EdgeKind::Prior => Kernel::None,
        }
    }

    /// `ρ(s)` on a whitened norm `s`.
    pub fn cost(&self, s: f64) -> f64 {
        match *self {
            Kernel::Huber(delta) if s > delta => delta * (s - delta / 2.0),
            _ => 0.5 * s * s,
        }
    }

    /// IRLS weight `ρ'(s)/s`.
    pub fn weight(&self, s: f64) -> f64 {
        match *self {
            Kernel::Huber(delta) if s > delta => delta / s,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoints {
    Unary(NodeId),
    Binary(NodeId, NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub kind: EdgeKind,
    pub endpoints: Endpoints,
    /// Relative pose for binary edges, absolute pose for priors.
    pub measurement: Pose,
    information: Matrix6<f64>,
    sqrt_information: Matrix6<f64>,
    pub kernel: Kernel,
}

impl GraphEdge {
    pub fn new(
        kind: EdgeKind,
        endpoints: Endpoints,
        measurement: Pose,
        information: Matrix6<f64>,
        kernel: Kernel,
    ) -> Result<Self, PoseGraphError> {
        let asym = (information - information.transpose()).amax();
        if !information.iter().all(|v| v.is_finite()) || asym > 1e-9 * information.amax().max(1.0) {
            return Err(PoseGraphError::InvalidInformation);
        }
        let sym = (information + information.transpose()) * 0.5;
        let chol = sym.cholesky().ok_or(PoseGraphError::InvalidInformation)?;
        Ok(Self {
            kind,
            endpoints,
            measurement,
            information: sym,
            sqrt_information: chol.l().transpose(),
            kernel,
        })
    }

    pub fn between(
        kind: EdgeKind,
        from: NodeId,
        to: NodeId,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<Self, PoseGraphError> {
        Self::new(kind, Endpoints::Binary(from, to), measurement, information, Kernel::default_for(kind))
    }

    pub fn prior(node: NodeId, measurement: Pose, information: Matrix6<f64>) -> Result<Self, PoseGraphError> {
        Self::new(
            EdgeKind::Prior,
            Endpoints::Unary(node),
            measurement,
            information,
            Kernel::default_for(EdgeKind::Prior),
        )
    }

    pub fn information(&self) -> &Matrix6<f64> {
        &self.information
    }

    /// Upper-triangular `L` with `LᵀL = information`.
    pub fn sqrt_information(&self) -> &Matrix6<f64> {
        &self.sqrt_information
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        match self.endpoints {
            Endpoints::Unary(a) => vec![a],
            Endpoints::Binary(a, b) => vec![a, b],
        }
    }
}

/// Diagonal information from rotational and translational standard deviations.
pub fn information_from_sigmas(sigma_rot: f64, sigma_trans: f64) -> Matrix6<f64> {
    let r = 1.0 / (sigma_rot * sigma_rot);
    let t = 1.0 / (sigma_trans * sigma_trans);
    Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    nodes: BTreeMap<NodeId, GraphNode>,
    edges: Vec<GraphEdge>,
    fixed: BTreeSet<NodeId>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId, session: u8, pose: Pose) -> Result<(), PoseGraphError> {
        if self.nodes.contains_key(&id) {
            return Err(PoseGraphError::DuplicateNode(id));
        }
        self.nodes.insert(id, GraphNode { id, session, pose });
        Ok(())
    }

    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<(), PoseGraphError> {
        for id in edge.nodes() {
            if !self.nodes.contains_key(&id) {
                return Err(PoseGraphError::UnknownNode(id));
            }
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn fix(&mut self, id: NodeId) -> Result<(), PoseGraphError> {
        if !self.nodes.contains_key(&id) {
            return Err(PoseGraphError::UnknownNode(id));
        }
        self.fixed.insert(id);
        Ok(())
    }

    pub fn unfix(&mut self, id: NodeId) {
        self.fixed.remove(&id);
    }

    pub fn is_fixed(&self, id: NodeId) -> bool {
        self.fixed.contains(&id)
    }

    pub fn fixed(&self) -> &BTreeSet<NodeId> {
        &self.fixed
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn set_pose(&mut self, id: NodeId, pose: Pose) -> Result<(), PoseGraphError> {
        self.nodes
            .get_mut(&id)
            .map(|n| n.pose = pose)
            .ok_or(PoseGraphError::UnknownNode(id))
    }

    pub fn pose(&self, id: NodeId) -> Option<&Pose> {
        self.nodes.get(&id).map(|n| &n.pose)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_id(&self) -> Option<NodeId> {
        self.nodes.keys().next_back().copied()
    }

    /// Poses of one session ordered by id.
    pub fn session_poses(&self, session: u8) -> Vec<(NodeId, Pose)> {
        self.nodes
            .values()
            .filter(|n| n.session == session)
            .map(|n| (n.id, n.pose))
            .collect()
    }

    fn pose_of(&self, id: NodeId) -> Result<&Pose, PoseGraphError> {
        self.pose(id).ok_or(PoseGraphError::UnknownNode(id))
    }
}

/// Unwhitened residual of one edge.
pub fn edge_residual(edge: &GraphEdge, graph: &PoseGraph) -> Result<Vector6<f64>, PoseGraphError> {
    let err = match edge.endpoints {
        Endpoints::Unary(a) => edge.measurement.inverse().compose(graph.pose_of(a)?),
        Endpoints::Binary(a, b) => {
            let rel = graph.pose_of(a)?.between(graph.pose_of(b)?);
            edge.measurement.inverse().compose(&rel)
        }
    };
    Ok(err.log().0)
}

/// Whitened residual and its Jacobians with respect to right perturbations
/// of each endpoint.
pub fn whitened_linearization(
    edge: &GraphEdge,
    graph: &PoseGraph,
) -> Result<(Vector6<f64>, Vec<(NodeId, Matrix6<f64>)>), PoseGraphError> {
    let r = edge_residual(edge, graph)?;
    let jr_inv = se3_right_jacobian_inv(&Twist(r));
    let l = &edge.sqrt_information;
    let jacobians = match edge.endpoints {
        Endpoints::Unary(a) => vec![(a, l * jr_inv)],
        Endpoints::Binary(a, b) => {
            let ti = graph.pose_of(a)?;
            let tj = graph.pose_of(b)?;
            let ad = tj.between(ti).adjoint();
            vec![(a, -(l * jr_inv * ad)), (b, l * jr_inv)]
        }
    };
    Ok((l * r, jacobians))
}

/// `Σ ρ(‖L·r‖)` over all edges.
pub fn robust_cost(graph: &PoseGraph) -> Result<f64, PoseGraphError> {
    graph.edges.iter().try_fold(0.0, |acc, edge| {
        let r = edge_residual(edge, graph)?;
        Ok(acc + edge.kernel.cost((edge.sqrt_information * r).norm()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerParams {
    pub initial_lambda: f64,
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub gradient_tolerance: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-4,
            max_iterations: 100,
            relative_cost_tolerance: 1e-6,
            gradient_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceReason {
    RelativeCostChange,
    GradientNorm,
    MaxIterations,
    DampingExhausted,
    NothingToOptimize,
}

impl std::fmt::Display for ConvergenceReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RelativeCostChange => "relative cost change below tolerance",
            Self::GradientNorm => "gradient norm below tolerance",
            Self::MaxIterations => "iteration limit reached",
            Self::DampingExhausted => "damping exhausted without progress",
            Self::NothingToOptimize => "no free nodes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost of the candidate step.
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after the initial state and after each accepted step.
    pub cost_trace: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub reason: ConvergenceReason,
}

/// Every free node must reach a fixed node or a prior through edges.
fn check_gauge(graph: &PoseGraph) -> Result<(), PoseGraphError> {
    let ids: Vec<NodeId> = graph.nodes.keys().copied().collect();
    let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut anchored = vec![false; ids.len()];
    for id in &graph.fixed {
        anchored[index[id]] = true;
    }
    for edge in &graph.edges {
        match edge.endpoints {
            Endpoints::Unary(a) => anchored[index[&a]] = true,
            Endpoints::Binary(a, b) => {
                let (ra, rb) = (find(&mut parent, index[&a]), find(&mut parent, index[&b]));
                parent[ra] = rb;
            }
        }
    }
    let mut root_anchored = vec![false; ids.len()];
    for i in 0..ids.len() {
        if anchored[i] {
            let r = find(&mut parent, i);
            root_anchored[r] = true;
        }
    }
    for i in 0..ids.len() {
        if !root_anchored[find(&mut parent, i)] {
            return Err(PoseGraphError::GaugeUnderdetermined(format!(
                "node {} is not connected to a fixed node or prior",
                ids[i]
            )));
        }
    }
    Ok(())
}

struct Linearized {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
}

fn linearize(graph: &PoseGraph, slots: &BTreeMap<NodeId, usize>) -> Result<Linearized, PoseGraphError> {
    let dim = slots.len() * 6;
    let mut hessian = DMatrix::zeros(dim, dim);
    let mut gradient = DVector::zeros(dim);
    for edge in &graph.edges {
        let (rw, jacs) = whitened_linearization(edge, graph)?;
        let w = edge.kernel.weight(rw.norm());
        let free: Vec<(usize, &Matrix6<f64>)> = jacs
            .iter()
            .filter_map(|(id, j)| slots.get(id).map(|&s| (s * 6, j)))
            .collect();
        for &(ra, ja) in &free {
            let g = ja.transpose() * rw * w;
            let mut seg = gradient.fixed_rows_mut::<6>(ra);
            seg += g;
            for &(rb, jb) in &free {
                let block = ja.transpose() * jb * w;
                let mut view = hessian.fixed_view_mut::<6, 6>(ra, rb);
                view += block;
            }
        }
    }
    Ok(Linearized { hessian, gradient })
}

fn apply_step(graph: &mut PoseGraph, slots: &BTreeMap<NodeId, usize>, step: &DVector<f64>) {
    for (id, &slot) in slots {
        let delta = Twist(step.fixed_rows::<6>(slot * 6).into_owned());
        let node = graph.nodes.get_mut(id).expect("slot for missing node");
        node.pose = node.pose.compose(&Pose::exp(&delta));
    }
}

/// Levenberg–Marquardt over all nodes not in `graph.fixed()`.
pub fn optimize(graph: &mut PoseGraph, params: &OptimizerParams) -> Result<OptimizationReport, PoseGraphError> {
    let has_prior = graph.edges.iter().any(|e| e.kind == EdgeKind::Prior);
    if graph.fixed.is_empty() && !has_prior {
        return Err(PoseGraphError::GaugeUnderdetermined(
            "no fixed node and no prior edge".into(),
        ));
    }
    check_gauge(graph)?;

    let slots: BTreeMap<NodeId, usize> = graph
        .nodes
        .keys()
        .filter(|id| !graph.fixed.contains(id))
        .enumerate()
        .map(|(slot, &id)| (id, slot))
        .collect();

    let initial_cost = robust_cost(graph)?;
    let mut report = OptimizationReport {
        iterations: 0,
        initial_cost,
        final_cost: initial_cost,
        cost_trace: vec![initial_cost],
        records: Vec::new(),
        reason: ConvergenceReason::MaxIterations,
    };
    if slots.is_empty() {
        report.reason = ConvergenceReason::NothingToOptimize;
        return Ok(report);
    }

    let mut cost = initial_cost;
    let mut lambda = params.initial_lambda;
    let mut lin = linearize(graph, &slots)?;
    let mut ever_factored = false;

    while report.iterations < params.max_iterations {
        if lin.gradient.amax() < params.gradient_tolerance {
            report.reason = ConvergenceReason::GradientNorm;
            break;
        }
        report.iterations += 1;

        let mut damped = lin.hessian.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda * lin.hessian[(i, i)];
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            if lambda > 1e12 {
                if !ever_factored {
                    return Err(PoseGraphError::GaugeUnderdetermined(
                        "normal equations are singular".into(),
                    ));
                }
                report.reason = ConvergenceReason::DampingExhausted;
                break;
            }
            continue;
        };
        ever_factored = true;
        let step = -chol.solve(&lin.gradient);

        let mut candidate = graph.clone();
        apply_step(&mut candidate, &slots, &step);
        let new_cost = robust_cost(&candidate)?;
        let accepted = new_cost < cost;
        report.records.push(IterationRecord {
            iteration: report.iterations,
            cost: new_cost,
            lambda,
            accepted,
        });

        if accepted {
            let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            *graph = candidate;
            cost = new_cost;
            report.cost_trace.push(cost);
            lambda = (lambda / 10.0).max(1e-12);
            if rel < params.relative_cost_tolerance {
                report.reason = ConvergenceReason::RelativeCostChange;
                break;
            }
            lin = linearize(graph, &slots)?;
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                report.reason = ConvergenceReason::DampingExhausted;
                break;
            }
        }
    }
    report.final_cost = cost;
    Ok(report)
}

/// Relative measurement between two session-2 trajectory indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMeasurement {
    pub from: usize,
    pub to: usize,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

/// Inter-session constraint `T(session1_id)⁻¹ · T(session-2 index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopMeasurement {
    pub session1_id: NodeId,
    pub session2_index: usize,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Session1Anchor {
    /// Session-1 poses are held constant.
    Fixed,
    /// Session-1 nodes stay free but get a prior at their current pose.
    SoftPrior { sigma_rot: f64, sigma_trans: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeOptions {
    pub anchor: Session1Anchor,
    /// Adds a prior on the first session-2 node at its initialized pose.
    pub init_prior: Option<Matrix6<f64>>,
    pub loop_kernel: Kernel,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            anchor: Session1Anchor::Fixed,
            init_prior: None,
            loop_kernel: Kernel::Huber(DEFAULT_HUBER_DELTA),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergedGraph {
    pub graph: PoseGraph,
    /// Node id of every session-2 trajectory index.
    pub session2_ids: Vec<NodeId>,
    pub warnings: Vec<String>,
}

/// Adds session 2 to an existing session-1 graph.
pub fn merge_sessions(
    graph1: &PoseGraph,
    trajectory2: &[Pose],
    odometry2: &[RelativeMeasurement],
    loops12: &[LoopMeasurement],
    t_init: &Pose,
    options: &MergeOptions,
) -> Result<MergedGraph, PoseGraphError> {
    if trajectory2.is_empty() {
        return Err(PoseGraphError::EmptyTrajectory);
    }
    let mut graph = graph1.clone();
    let offset = graph1.max_id().map_or(0, |m| m + 1);
    let session2_ids: Vec<NodeId> = (0..trajectory2.len()).map(|i| offset + i).collect();

    let session1: Vec<(NodeId, Pose)> = graph1.nodes().map(|n| (n.id, n.pose)).collect();
    match options.anchor {
        Session1Anchor::Fixed => {
            for (id, _) in &session1 {
                graph.fix(*id)?;
            }
        }
        Session1Anchor::SoftPrior { sigma_rot, sigma_trans } => {
            let info = information_from_sigmas(sigma_rot, sigma_trans);
            for (id, pose) in &session1 {
                graph.unfix(*id);
                graph.add_edge(GraphEdge::prior(*id, *pose, info)?)?;
            }
        }
    }

    for (i, pose) in trajectory2.iter().enumerate() {
        graph.add_node(session2_ids[i], 2, t_init.compose(pose))?;
    }
    let id_of = |i: usize| session2_ids.get(i).copied().ok_or(PoseGraphError::IndexOutOfRange(i));
    for m in odometry2 {
        graph.add_edge(GraphEdge::between(EdgeKind::Odometry, id_of(m.from)?, id_of(m.to)?, m.measurement, m.information)?)?;
    }
    let mut warnings = Vec::new();
    if loops12.is_empty() {
        warnings.push("sessions connected only by T_init".to_string());
    }
    for l in loops12 {
        let edge = GraphEdge::new(
            EdgeKind::Loop,
            Endpoints::Binary(l.session1_id, id_of(l.session2_index)?),
            l.measurement,
            l.information,
            options.loop_kernel,
        )?;
        graph.add_edge(edge)?;
    }
    if let Some(info) = options.init_prior {
        let first = session2_ids[0];
        let pose = *graph.pose_of(first)?;
        graph.add_edge(GraphEdge::prior(first, pose, info)?)?;
    }
    Ok(MergedGraph {
        graph,
        session2_ids,
        warnings,
    })
}

/// Translation RMSE between index-aligned trajectories, no alignment.
pub fn evaluate_ate(estimate: &[Pose], ground_truth: &[Pose]) -> Result<f64, PoseGraphError> {
    if estimate.len() != ground_truth.len() {
        return Err(PoseGraphError::LengthMismatch(estimate.len(), ground_truth.len()));
    }
    if estimate.is_empty() {
        return Err(PoseGraphError::EmptyTrajectory);
    }
    let sq: f64 = estimate
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| (e.translation - g.translation).norm_squared())
        .sum();
    Ok((sq / estimate.len() as f64).sqrt())
}
