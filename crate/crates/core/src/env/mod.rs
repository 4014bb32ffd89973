//! Deterministic 2D tabletop: a point gripper, point objects and a fixed
//! basket. Everything is a pure function of (state, action).

pub mod dataset;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::vocab::{SynonymTable, NOVEL_TYPES, TRAINING_TYPES};

pub const MAX_DELTA: f64 = 0.1;
pub const GRASP_RADIUS: f64 = 0.05;
pub const BASKET_RADIUS: f64 = 0.1;
pub const BASKET_CENTER: [f64; 2] = [0.8, 0.8];
pub const MIN_SEPARATION: f64 = 0.15;
/// Objects start at least this far from the basket center.
pub const BASKET_CLEARANCE: f64 = 0.25;
pub const MAX_STEPS: usize = 80;
const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("could not place object {index} after {tries} samples")]
    Placement { index: usize, tries: usize },
    #[error("invalid task: {0}")]
    Task(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grip {
    Open,
    Closed,
}

impl Grip {
    /// +1 closed, −1 open.
    pub fn signed(self) -> f64 {
        match self {
            Grip::Open => -1.0,
            Grip::Closed => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: u32,
    pub type_id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basket {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl Default for Basket {
    fn default() -> Self {
        Self { x: BASKET_CENTER[0], y: BASKET_CENTER[1], radius: BASKET_RADIUS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper: [f64; 2],
    pub grip: Grip,
    pub held: Option<u32>,
    pub objects: Vec<Object>,
    pub basket: Basket,
    pub step_count: usize,
}

impl WorldState {
    pub fn object(&self, id: u32) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Gripper x, y and signed grip state.
    pub fn proprio(&self) -> [f64; 3] {
        [self.gripper[0], self.gripper[1], self.grip.signed()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PickPlace,
    /// Pick-place of a cup with the basket standing in for a bowl.
    Pour,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "pick-place" => Some(TaskKind::PickPlace),
            "pour" => Some(TaskKind::Pour),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "pick-place",
            TaskKind::Pour => "pour",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub target_type: u32,
    pub instruction: Vec<u32>,
    pub distractor_types: Vec<u32>,
    pub max_steps: usize,
}

impl TaskSpec {
    pub fn pick_place(target_type: u32, distractor_types: Vec<u32>) -> Self {
        use vocab::*;
        Self {
            kind: TaskKind::PickPlace,
            target_type,
            instruction: vec![PICK, THE, type_token(target_type), AND, PLACE, IT, IN, THE, BASKET],
            distractor_types,
            max_steps: MAX_STEPS,
        }
    }

    pub fn pour() -> Self {
        use vocab::*;
        Self {
            kind: TaskKind::Pour,
            target_type: TYPE_CUP,
            instruction: vec![POUR, WATER, IN, THE, CUP, INTO, THE, BOWL],
            distractor_types: vec![TYPE_BLOCK],
            max_steps: MAX_STEPS,
        }
    }

    /// The standard task of a kind, as used for data generation.
    pub fn standard(kind: TaskKind) -> Self {
        match kind {
            TaskKind::PickPlace => Self::pick_place(vocab::TYPE_APPLE, vec![vocab::TYPE_BLOCK]),
            TaskKind::Pour => Self::pour(),
        }
    }

    /// Rebuilds a task from the fields stored in a dataset record.
    pub fn from_record(kind: TaskKind, target_type: u32, instruction: Vec<u32>, distractor_types: Vec<u32>) -> Self {
        Self { kind, target_type, instruction, distractor_types, max_steps: MAX_STEPS }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.distractor_types.contains(&self.target_type) {
            return Err(EnvError::Task("distractor shares the target type".into()));
        }
        if self.instruction.is_empty() {
            return Err(EnvError::Task("empty instruction".into()));
        }
        Ok(())
    }
}

/// Substitutes a held-out object type (and its instruction token) for the
/// task's target.
pub fn swap_novel_object(task: &TaskSpec, novel_type_id: u32) -> Result<TaskSpec, EnvError> {
    if TRAINING_TYPES.contains(&novel_type_id) || !NOVEL_TYPES.iter().any(|(t, _)| *t == novel_type_id) {
        return Err(EnvError::Task(format!("type {novel_type_id} is not a held-out type")));
    }
    let old_tok = vocab::type_token(task.target_type);
    let new_tok = vocab::type_token(novel_type_id);
    let mut out = task.clone();
    out.target_type = novel_type_id;
    out.instruction = task.instruction.iter().map(|t| if *t == old_tok { new_tok } else { *t }).collect();
    Ok(out)
}

/// Same task with every content word replaced by a synonym.
pub fn rephrase_task(task: &TaskSpec, table: &SynonymTable, seed: u64) -> TaskSpec {
    let mut out = task.clone();
    out.instruction = vocab::rephrase_instruction(&task.instruction, table, seed);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, grip: f64) -> Self {
        Self { dx, dy, grip }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.grip]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { dx: v[0], dy: v[1], grip: v[2] }
    }

    pub fn clipped(self) -> Self {
        Self {
            dx: self.dx.clamp(-MAX_DELTA, MAX_DELTA),
            dy: self.dy.clamp(-MAX_DELTA, MAX_DELTA),
            grip: self.grip,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Seeded initial state: uniform gripper, objects uniform with pairwise
/// separation and basket clearance enforced by rejection sampling.
pub fn reset(task: &TaskSpec, seed: u64) -> Result<WorldState, EnvError> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gripper = [rng.gen::<f64>(), rng.gen::<f64>()];
    let types: Vec<u32> = std::iter::once(task.target_type).chain(task.distractor_types.iter().copied()).collect();
    let mut objects: Vec<Object> = Vec::with_capacity(types.len());
    for (index, type_id) in types.into_iter().enumerate() {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let p = [rng.gen::<f64>(), rng.gen::<f64>()];
            let clear = dist(p, BASKET_CENTER) >= BASKET_CLEARANCE
                && objects.iter().all(|o| dist(p, [o.x, o.y]) >= MIN_SEPARATION);
            if clear {
                placed = Some(p);
                break;
            }
        }
        let p = placed.ok_or(EnvError::Placement { index, tries: PLACEMENT_TRIES })?;
        objects.push(Object { id: index as u32, type_id, x: p[0], y: p[1] });
    }
    Ok(WorldState { gripper, grip: Grip::Open, held: None, objects, basket: Basket::default(), step_count: 0 })
}

/// Advances one tick. Translation happens before the grip change.
pub fn step(state: &WorldState, action: Action) -> WorldState {
    let a = action.clipped();
    let mut s = state.clone();
    s.gripper = [(s.gripper[0] + a.dx).clamp(0.0, 1.0), (s.gripper[1] + a.dy).clamp(0.0, 1.0)];
    if a.grip > 0.0 {
        if s.grip == Grip::Open {
            s.grip = Grip::Closed;
            let g = s.gripper;
            s.held = s
                .objects
                .iter()
                .filter(|o| dist(g, [o.x, o.y]) <= GRASP_RADIUS)
                .min_by(|a, b| dist(g, [a.x, a.y]).total_cmp(&dist(g, [b.x, b.y])))
                .map(|o| o.id);
        }
    } else if a.grip < 0.0 {
        s.grip = Grip::Open;
        s.held = None;
    }
    if let Some(id) = s.held {
        let g = s.gripper;
        if let Some(o) = s.objects.iter_mut().find(|o| o.id == id) {
            o.x = g[0];
            o.y = g[1];
        }
    }
    s.step_count += 1;
    s
}

fn target_object<'a>(state: &'a WorldState, task: &TaskSpec) -> Option<&'a Object> {
    state.objects.iter().find(|o| o.type_id == task.target_type)
}

/// The target is released and inside the basket radius.
pub fn success_check(state: &WorldState, task: &TaskSpec) -> bool {
    match target_object(state, task) {
        Some(o) => state.held != Some(o.id) && dist([o.x, o.y], [state.basket.x, state.basket.y]) <= state.basket.radius,
        None => false,
    }
}

/// Unit vector toward `d`; a zero displacement resolves to +x.
fn direction(d: [f64; 2]) -> [f64; 2] {
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n == 0.0 {
        [1.0, 0.0]
    } else {
        [d[0] / n, d[1] / n]
    }
}

fn move_toward(from: [f64; 2], to: [f64; 2], grip: f64) -> Action {
    let d = [to[0] - from[0], to[1] - from[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let u = direction(d);
    let len = n.min(MAX_DELTA);
    Action::new(u[0] * len, u[1] * len, grip)
}

/// Phase policy: approach, close, carry, open over the basket.
pub fn scripted_expert(state: &WorldState, task: &TaskSpec) -> Action {
    let Some(target) = target_object(state, task) else {
        return Action::new(0.0, 0.0, -1.0);
    };
    let basket = [state.basket.x, state.basket.y];
    match state.held {
        Some(id) if id == target.id => {
            if dist(state.gripper, basket) <= GRASP_RADIUS {
                Action::new(0.0, 0.0, -1.0)
            } else {
                move_toward(state.gripper, basket, 1.0)
            }
        }
        Some(_) => Action::new(0.0, 0.0, -1.0),
        None if state.grip == Grip::Closed => Action::new(0.0, 0.0, -1.0),
        None => {
            let t = [target.x, target.y];
            if dist(state.gripper, t) <= GRASP_RADIUS {
                Action::new(0.0, 0.0, 1.0)
            } else {
                move_toward(state.gripper, t, -1.0)
            }
        }
    }
}

/// Runs the expert from `reset(task, seed)` until success or the step limit.
pub fn expert_rollout(task: &TaskSpec, seed: u64) -> Result<(Vec<(WorldState, Action)>, bool), EnvError> {
    let mut s = reset(task, seed)?;
    let mut steps = Vec::new();
    while s.step_count < task.max_steps {
        let a = scripted_expert(&s, task);
        let next = step(&s, a);
        steps.push((s, a));
        s = next;
        if success_check(&s, task) {
            return Ok((steps, true));
        }
    }
    Ok((steps, false))
}

#[cfg(test)]
mod tests {
    use super::vocab::*;
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec::standard(TaskKind::PickPlace)
    }

    fn world(gripper: [f64; 2], objects: Vec<Object>) -> WorldState {
        WorldState { gripper, grip: Grip::Open, held: None, objects, basket: Basket::default(), step_count: 0 }
    }

    fn apple(x: f64, y: f64) -> Object {
        Object { id: 0, type_id: TYPE_APPLE, x, y }
    }

    #[test]
    fn reset_is_seeded_and_separated() {
        let t = task();
        assert_eq!(reset(&t, 42).unwrap(), reset(&t, 42).unwrap());
        assert_ne!(reset(&t, 42).unwrap(), reset(&t, 43).unwrap());
        for seed in 0..200 {
            let s = reset(&t, seed).unwrap();
            assert!(s.objects.iter().any(|o| o.type_id == t.target_type));
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert!(dist([a.x, a.y], [b.x, b.y]) >= MIN_SEPARATION);
                }
            }
        }
    }

    #[test]
    fn unplaceable_scene_is_error() {
        let t = TaskSpec::pick_place(TYPE_APPLE, vec![TYPE_CUP; 60]);
        assert!(matches!(reset(&t, 1), Err(EnvError::Placement { .. })));
    }

    #[test]
    fn noop_only_advances_step_count() {
        let s = world([0.3, 0.4], vec![apple(0.6, 0.2)]);
        let n = step(&s, Action::new(0.0, 0.0, 0.0));
        assert_eq!(n.step_count, 1);
        assert_eq!(WorldState { step_count: 0, ..n }, s);
    }

    #[test]
    fn close_within_threshold_grasps() {
        let s = world([0.5, 0.5], vec![apple(0.54, 0.5)]);
        let n = step(&s, Action::new(0.0, 0.0, 1.0));
        assert_eq!(n.held, Some(0));
        assert_eq!(n.object(0).unwrap().x, 0.5);
        let s = world([0.5, 0.5], vec![apple(0.56, 0.5)]);
        assert_eq!(step(&s, Action::new(0.0, 0.0, 1.0)).held, None);
    }

    #[test]
    fn release_in_basket_succeeds() {
        let t = task();
        let mut s = world([0.75, 0.8], vec![apple(0.75, 0.8)]);
        s.grip = Grip::Closed;
        s.held = Some(0);
        assert!(!success_check(&s, &t), "held objects never count");
        let n = step(&s, Action::new(0.0, 0.0, -1.0));
        assert!(success_check(&n, &t));
    }

    #[test]
    fn radius_rule() {
        let t = task();
        let s = world([0.1, 0.1], vec![apple(0.8, 0.8)]);
        assert!(success_check(&s, &t));
        let s = world([0.1, 0.1], vec![apple(0.8 + 0.11, 0.8)]);
        assert!(!success_check(&s, &t));
    }

    #[test]
    fn expert_direction_is_normalized() {
        let s = world([0.0, 0.0], vec![apple(0.5, 0.5)]);
        let a = scripted_expert(&s, &task());
        assert!((a.dx - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert!((a.dy - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.grip, -1.0);
    }

    #[test]
    fn expert_closes_near_target() {
        let s = world([0.5, 0.5], vec![apple(0.53, 0.52)]);
        assert_eq!(scripted_expert(&s, &task()), Action::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn expert_solves_every_seed() {
        let t = task();
        for seed in 0..1000 {
            let (steps, ok) = expert_rollout(&t, seed).unwrap();
            assert!(ok, "seed {seed} failed");
            assert!(steps.len() <= t.max_steps);
            for (_, a) in &steps {
                assert!(a.dx.abs() <= MAX_DELTA + 1e-12 && a.dy.abs() <= MAX_DELTA + 1e-12);
            }
        }
        let pour = TaskSpec::pour();
        for seed in 0..200 {
            assert!(expert_rollout(&pour, seed).unwrap().1);
        }
    }

    #[test]
    fn novel_swap_replaces_type_and_token() {
        let t = task();
        let n = swap_novel_object(&t, TYPE_BOTTLE).unwrap();
        assert!(!TRAINING_TYPES.contains(&n.target_type));
        assert!(n.instruction.contains(&BOTTLE));
        assert!(!n.instruction.contains(&APPLE));
        assert!(swap_novel_object(&t, TYPE_CUP).is_err());
    }
}
