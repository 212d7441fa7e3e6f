//! Procedural changing indoor scenes with known ground truth.
//!
//! Each environment is a rectangular room. Furniture and support surfaces sit
//! on a floor grid, doors and windows on wall slots, handheld items on
//! supports and clutter anywhere on the floor. Between consecutive scans every
//! object draws its changes from a propensity that depends on its class and on
//! its context in the previous scan (which support it stands on, which classes
//! are close by). Every applied change is written to a [`ChangeLog`].
//!
//! A move always lands at least `min_move` away from every position the object
//! ever held, and observed positions carry at most `position_noise` of uniform
//! jitter per axis. Net observed displacement between two scans is therefore
//! below `2 * sqrt(3) * position_noise` when the object did not move and above
//! `min_move - 2 * sqrt(3) * position_noise` when it did.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{assign_splits, Dataset, Environment};
use crate::error::{Error, Result};
use crate::graph::{
    distance, parse_json, AttributeDef, AttributeKind, ObjectId, ObjectNode, ScanInfo, SceneGraph, SemanticEdge,
    Taxonomy, Vec3,
};
use crate::par::{self, Execution};
use crate::rng::seeded;

pub const STANDING_ON: &str = "standing on";
pub const SUPPORTS: &str = "supports";
pub const CLOSE_BY: &str = "close by";

const MAX_PLACEMENT_TRIES: usize = 64;
const SURFACE_HALF_EXTENT: f64 = 0.3;
const WALL_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Free-standing, one floor-grid cell each.
    Furniture,
    /// Like furniture, but carries surface items. Never moves or vanishes.
    Support,
    /// On a wall slot. Never moves or vanishes.
    Wall,
    /// Stands on a support.
    Surface,
    /// Anywhere on the floor, no spacing constraint.
    Floor,
}

impl Placement {
    fn on_grid(self) -> bool {
        matches!(self, Placement::Furniture | Placement::Support)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Propensity {
    /// Probability of a move per transition.
    pub move_prob: f64,
    /// Probability of switching to a different state per transition.
    pub state_prob: f64,
    /// Probability of vanishing per transition.
    pub disappear_prob: f64,
    /// Expected number of new instances per transition (Poisson).
    pub appear_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Stands on a support of this class.
    On(String),
    /// Has a `close by` relation to an object of this class.
    Near(String),
}

/// Overrides part of a class propensity when its condition holds in the scan
/// the transition starts from. The first matching rule wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextRule {
    pub when: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub move_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disappear_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub placement: Placement,
    /// Inclusive instance count range per room.
    pub count: [usize; 2],
    /// Height of the object centre above the floor, or above the support top
    /// for surface items.
    pub height: f64,
    /// Capacity for surface items (supports only).
    #[serde(default)]
    pub slots: usize,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub affordances: Vec<String>,
    /// Mutually exclusive state attributes; empty for stateless classes.
    #[serde(default)]
    pub states: Vec<String>,
    #[serde(default)]
    pub propensity: Propensity,
    #[serde(default)]
    pub rules: Vec<ContextRule>,
    /// Grid placement next to objects of other classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beside: Option<Beside>,
}

/// With probability `prob`, take a free grid cell adjacent (8-neighbourhood)
/// to an already placed object of one of `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Beside {
    pub classes: Vec<String>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub taxonomy_name: String,
    pub environments: usize,
    pub scans_per_environment: usize,
    /// Train / val / test fractions over environments.
    pub split: [f64; 3],
    /// Smallest and largest room footprint (x, y), meters.
    pub room_min: [f64; 2],
    pub room_max: [f64; 2],
    /// Floor-grid cell edge and wall-slot spacing, meters.
    pub cell_size: f64,
    /// Uniform observation jitter per axis, meters.
    pub position_noise: f64,
    pub min_move: f64,
    /// Distance below which floor-level objects are `close by`.
    pub near_radius: f64,
    pub classes: Vec<ClassSpec>,
}

impl GeneratorSpec {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let spec: Self = parse_json(text, origin)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    /// Built-in living-room/office mix.
    pub fn indoor() -> Self {
        fn class(name: &str, placement: Placement, count: [usize; 2], height: f64) -> ClassSpec {
            ClassSpec {
                name: name.into(),
                placement,
                count,
                height,
                slots: 0,
                attributes: vec![],
                affordances: vec![],
                states: vec![],
                propensity: Propensity::default(),
                rules: vec![],
                beside: None,
            }
        }
        fn rule(when: Condition, move_prob: Option<f64>, state_prob: Option<f64>) -> ContextRule {
            ContextRule {
                when,
                move_prob,
                state_prob,
                disappear_prob: None,
            }
        }
        fn strs(v: &[&str]) -> Vec<String> {
            v.iter().map(|s| s.to_string()).collect()
        }
        use Condition::{Near, On};
        use Placement::*;

        let mut table = class("table", Support, [1, 2], 0.4);
        table.slots = 4;
        table.attributes = strs(&["wooden"]);
        table.affordances = strs(&["placing items on"]);
        let mut desk = class("desk", Support, [1, 1], 0.4);
        desk.slots = 3;
        desk.attributes = strs(&["wooden"]);
        desk.affordances = strs(&["placing items on"]);
        let mut shelf = class("shelf", Support, [0, 1], 0.9);
        shelf.slots = 3;
        shelf.affordances = strs(&["placing items on"]);
        let mut cabinet = class("cabinet", Support, [0, 1], 0.5);
        cabinet.slots = 2;
        cabinet.states = strs(&["open", "closed"]);
        cabinet.affordances = strs(&["opening", "placing items on"]);
        cabinet.propensity.state_prob = 0.03;

        let mut chair = class("chair", Furniture, [2, 4], 0.45);
        chair.affordances = strs(&["sitting"]);
        chair.propensity.move_prob = 0.03;
        chair.rules = vec![
            rule(Near("table".into()), Some(0.95), None),
            rule(Near("desk".into()), Some(0.9), None),
        ];
        chair.beside = Some(Beside {
            classes: strs(&["table", "desk"]),
            prob: 0.8,
        });
        let mut sofa = class("sofa", Furniture, [0, 1], 0.4);
        sofa.attributes = strs(&["soft"]);
        sofa.affordances = strs(&["sitting"]);
        let mut bed = class("bed", Furniture, [0, 1], 0.3);
        bed.attributes = strs(&["soft"]);
        let mut wardrobe = class("wardrobe", Furniture, [0, 1], 1.0);
        wardrobe.states = strs(&["open", "closed"]);
        wardrobe.affordances = strs(&["opening"]);
        wardrobe.propensity.state_prob = 0.05;
        let mut plant = class("plant", Furniture, [0, 1], 0.5);
        plant.propensity.move_prob = 0.02;

        let mut door = class("door", Wall, [1, 2], 1.0);
        door.states = strs(&["open", "closed", "ajar"]);
        door.affordances = strs(&["opening"]);
        door.propensity.state_prob = 0.95;
        let mut window = class("window", Wall, [0, 1], 1.5);
        window.states = strs(&["open", "closed"]);
        window.affordances = strs(&["opening"]);
        window.propensity.state_prob = 0.03;
        let picture = class("picture", Wall, [0, 1], 1.5);

        let mut cup = class("cup", Surface, [1, 3], 0.05);
        cup.attributes = strs(&["ceramic"]);
        cup.propensity.move_prob = 0.05;
        cup.rules = vec![rule(On("table".into()), Some(0.95), None)];
        let mut book = class("book", Surface, [1, 2], 0.05);
        book.propensity.move_prob = 0.03;
        book.rules = vec![rule(On("desk".into()), Some(0.95), None)];
        let mut bottle = class("bottle", Surface, [0, 1], 0.1);
        bottle.attributes = strs(&["plastic"]);
        bottle.propensity.move_prob = 0.05;
        bottle.rules = vec![rule(On("table".into()), Some(0.95), None)];
        let mut laptop = class("laptop", Surface, [0, 1], 0.02);
        laptop.states = strs(&["on", "off"]);
        laptop.propensity.move_prob = 0.03;
        laptop.propensity.state_prob = 0.05;
        laptop.rules = vec![rule(On("desk".into()), None, Some(0.95))];

        let mut boxes = class("box", Floor, [1, 2], 0.2);
        boxes.propensity.disappear_prob = 0.95;
        boxes.propensity.appear_rate = 0.8;
        let mut bag = class("bag", Floor, [0, 2], 0.2);
        bag.attributes = strs(&["soft"]);
        bag.propensity.disappear_prob = 0.95;
        bag.propensity.appear_rate = 0.5;
        let mut clothes = class("clothes", Floor, [1, 2], 0.05);
        clothes.attributes = strs(&["soft"]);
        clothes.propensity.disappear_prob = 0.95;
        clothes.propensity.appear_rate = 0.8;

        GeneratorSpec {
            taxonomy_name: "synthetic-indoor".into(),
            environments: 100,
            scans_per_environment: 3,
            split: [0.7, 0.15, 0.15],
            room_min: [6.0, 5.0],
            room_max: [10.0, 8.0],
            cell_size: 1.2,
            position_noise: 0.02,
            min_move: 0.3,
            near_radius: 1.5,
            classes: vec![
                table, desk, shelf, cabinet, chair, sofa, bed, wardrobe, plant, door, window, picture, cup, book,
                bottle, laptop, boxes, bag, clothes,
            ],
        }
    }

    /// Same classes and propensities as [`GeneratorSpec::indoor`] in larger
    /// rooms with more static furniture, so changes are sparser. Every
    /// environment lands in the test split; used for planner episodes.
    pub fn indoor_cluttered() -> Self {
        let mut spec = Self::indoor();
        spec.environments = 30;
        spec.split = [0.0, 0.0, 1.0];
        spec.room_min = [12.0, 9.0];
        spec.room_max = [16.0, 12.0];
        for class in &mut spec.classes {
            let count = match class.name.as_str() {
                "sofa" | "wardrobe" => [2, 3],
                "bed" => [1, 2],
                "plant" | "picture" => [4, 7],
                "shelf" => [2, 3],
                "window" => [2, 4],
                "cabinet" => [1, 2],
                _ => continue,
            };
            class.count = count;
        }
        spec
    }

    fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    fn grid_cells(&self, room: [f64; 2]) -> (usize, usize) {
        (
            (room[0] / self.cell_size).floor() as usize,
            (room[1] / self.cell_size).floor() as usize,
        )
    }

    fn wall_slots(&self, room: [f64; 2]) -> usize {
        (2.0 * (room[0] + room[1]) / self.cell_size).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Generator(m));
        if self.environments == 0 || self.scans_per_environment == 0 {
            return err("environments and scans_per_environment must be >= 1".into());
        }
        let fsum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (fsum - 1.0).abs() > 1e-9 {
            return err(format!("split fractions {:?} must be in [0,1] and sum to 1", self.split));
        }
        for (lo, hi) in self.room_min.iter().zip(&self.room_max) {
            if !(*lo > 0.0 && lo <= hi && hi.is_finite()) {
                return err(format!("room extent {:?}..{:?} is invalid", self.room_min, self.room_max));
            }
        }
        for (name, v) in [
            ("cell_size", self.cell_size),
            ("min_move", self.min_move),
            ("near_radius", self.near_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.position_noise >= 0.0) || self.min_move < 4.0 * 3f64.sqrt() * self.position_noise {
            return err(format!(
                "min_move {} must be at least 4*sqrt(3)*position_noise ({})",
                self.min_move,
                4.0 * 3f64.sqrt() * self.position_noise
            ));
        }
        if self.classes.is_empty() {
            return err("no classes".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return err(format!("duplicate class `{}`", c.name));
            }
            if c.count[0] > c.count[1] {
                return err(format!("class `{}`: count range {:?} is empty", c.name, c.count));
            }
            if !(c.height >= 0.0 && c.height.is_finite()) {
                return err(format!("class `{}`: height must be >= 0", c.name));
            }
            let p = &c.propensity;
            let probs = [Some(p.move_prob), Some(p.state_prob), Some(p.disappear_prob)]
                .into_iter()
                .chain(c.rules.iter().flat_map(|r| [r.move_prob, r.state_prob, r.disappear_prob]))
                .flatten();
            for v in probs {
                if !(0.0..=1.0).contains(&v) {
                    return err(format!("class `{}`: probability {v} outside [0,1]", c.name));
                }
            }
            if !(p.appear_rate >= 0.0 && p.appear_rate.is_finite()) {
                return err(format!("class `{}`: appear_rate must be >= 0", c.name));
            }
            let can_move = p.move_prob > 0.0 || c.rules.iter().any(|r| r.move_prob.is_some_and(|v| v > 0.0));
            let can_vanish =
                p.disappear_prob > 0.0 || c.rules.iter().any(|r| r.disappear_prob.is_some_and(|v| v > 0.0));
            if matches!(c.placement, Placement::Support | Placement::Wall) && (can_move || can_vanish) {
                return err(format!("class `{}`: {:?} objects cannot move or vanish", c.name, c.placement));
            }
            if p.appear_rate > 0.0 && c.placement.on_grid() || p.appear_rate > 0.0 && c.placement == Placement::Wall {
                return err(format!("class `{}`: only surface and floor objects can appear", c.name));
            }
            if c.placement == Placement::Support && c.slots == 0 {
                return err(format!("support class `{}` needs slots > 0", c.name));
            }
            if (p.state_prob > 0.0 || c.rules.iter().any(|r| r.state_prob.is_some())) && c.states.len() < 2 {
                return err(format!("class `{}`: state changes need at least two states", c.name));
            }
            if let Some(b) = &c.beside {
                if !c.placement.on_grid() || !(0.0..=1.0).contains(&b.prob) {
                    return err(format!("class `{}`: `beside` needs a grid placement and prob in [0,1]", c.name));
                }
                for t in &b.classes {
                    if !self.class_index(t).is_some_and(|j| self.classes[j].placement.on_grid()) {
                        return err(format!("class `{}`: `beside` target `{t}` is not a grid class", c.name));
                    }
                }
            }
            for r in &c.rules {
                match &r.when {
                    Condition::On(t) => match self.class_index(t) {
                        Some(j) if self.classes[j].placement == Placement::Support => {}
                        _ => return err(format!("class `{}`: rule target `{t}` is not a support class", c.name)),
                    },
                    Condition::Near(t) => {
                        if self.class_index(t).is_none() {
                            return err(format!("class `{}`: unknown rule target `{t}`", c.name));
                        }
                    }
                }
            }
        }
        let max_of = |pl: fn(Placement) -> bool| -> usize {
            self.classes.iter().filter(|c| pl(c.placement)).map(|c| c.count[1]).sum()
        };
        let (nx, ny) = self.grid_cells(self.room_min);
        let grid_needed = max_of(|p| p.on_grid());
        if grid_needed > nx * ny {
            return err(format!(
                "infeasible: up to {grid_needed} floor-grid objects but the smallest room has {} cells",
                nx * ny
            ));
        }
        let wall_needed = max_of(|p| p == Placement::Wall);
        if wall_needed > self.wall_slots(self.room_min) {
            return err(format!(
                "infeasible: up to {wall_needed} wall objects but the smallest room has {} wall slots",
                self.wall_slots(self.room_min)
            ));
        }
        let surface_needed = max_of(|p| p == Placement::Surface);
        let min_slots: usize = self
            .classes
            .iter()
            .filter(|c| c.placement == Placement::Support)
            .map(|c| c.count[0] * c.slots)
            .sum();
        if surface_needed > min_slots {
            return err(format!(
                "infeasible: up to {surface_needed} surface items but guaranteed support capacity is {min_slots}"
            ));
        }
        self.taxonomy().map(|_| ())
    }

    /// Classes in spec order; attributes in order of first mention.
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let mut attrs: Vec<AttributeDef> = Vec::new();
        for c in &self.classes {
            let groups = [
                (&c.attributes, AttributeKind::Static),
                (&c.affordances, AttributeKind::Affordance),
                (&c.states, AttributeKind::State),
            ];
            for (names, kind) in groups {
                for n in names {
                    match attrs.iter().find(|a| &a.name == n) {
                        Some(a) if a.kind != kind => {
                            return Err(Error::Generator(format!(
                                "attribute `{n}` is used as both {:?} and {kind:?}",
                                a.kind
                            )))
                        }
                        Some(_) => {}
                        None => attrs.push(AttributeDef::new(n.clone(), kind)),
                    }
                }
            }
        }
        Taxonomy::new(
            self.taxonomy_name.clone(),
            self.classes.iter().map(|c| c.name.clone()).collect(),
            attrs,
            vec![STANDING_ON.into(), SUPPORTS.into(), CLOSE_BY.into()],
        )
        .map_err(|e| Error::Generator(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: ObjectId,
    pub class: String,
    pub state: Option<String>,
}

/// One applied change. Positions are true (noise-free) positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChangeEvent {
    Moved { id: ObjectId, from: Vec3, to: Vec3 },
    StateChanged { id: ObjectId, from: String, to: String },
    Disappeared { id: ObjectId },
    Appeared { id: ObjectId, class: String, state: Option<String> },
}

/// Everything the generator did to one environment. `transitions[k]` holds
/// the changes between scan `k` and scan `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeLog {
    pub environment_id: String,
    pub initial: Vec<ObjectRecord>,
    pub transitions: Vec<Vec<ChangeEvent>>,
}

#[derive(Debug, Clone)]
struct Obj {
    id: ObjectId,
    class: usize,
    pos: Vec3,
    state: Option<usize>,
    support: Option<ObjectId>,
    history: Vec<Vec3>,
}

struct World<'a> {
    spec: &'a GeneratorSpec,
    room: [f64; 2],
    objects: BTreeMap<ObjectId, Obj>,
    next_id: ObjectId,
}

impl<'a> World<'a> {
    fn far_from_history(&self, history: &[Vec3], p: &Vec3) -> bool {
        history.iter().all(|h| distance(h, p) >= self.spec.min_move)
    }

    fn support_load(&self, support: ObjectId) -> usize {
        self.objects.values().filter(|o| o.support == Some(support)).count()
    }

    fn free_supports(&self, also: Option<ObjectId>) -> Vec<ObjectId> {
        self.objects
            .values()
            .filter(|o| self.spec.classes[o.class].placement == Placement::Support)
            .filter(|o| Some(o.id) == also || self.support_load(o.id) < self.spec.classes[o.class].slots)
            .map(|o| o.id)
            .collect()
    }

    fn surface_spot<R: Rng>(&self, support: ObjectId, class: usize, rng: &mut R) -> Vec3 {
        let s = &self.objects[&support];
        [
            s.pos[0] + rng.random_range(-SURFACE_HALF_EXTENT..=SURFACE_HALF_EXTENT),
            s.pos[1] + rng.random_range(-SURFACE_HALF_EXTENT..=SURFACE_HALF_EXTENT),
            s.pos[2] + self.spec.classes[s.class].height + self.spec.classes[class].height,
        ]
    }

    fn floor_spot<R: Rng>(&self, class: usize, rng: &mut R) -> Vec3 {
        [
            rng.random_range(WALL_MARGIN..=self.room[0] - WALL_MARGIN),
            rng.random_range(WALL_MARGIN..=self.room[1] - WALL_MARGIN),
            self.spec.classes[class].height,
        ]
    }

    fn random_state<R: Rng>(&self, class: usize, rng: &mut R) -> Option<usize> {
        let n = self.spec.classes[class].states.len();
        (n > 0).then(|| rng.random_range(0..n))
    }

    fn insert(&mut self, class: usize, pos: Vec3, state: Option<usize>, support: Option<ObjectId>) -> ObjectId {
        let id = self.next_id;
        self.next_id += 1;
        self.objects.insert(
            id,
            Obj {
                id,
                class,
                pos,
                state,
                support,
                history: vec![pos],
            },
        );
        id
    }

    fn populate<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let spec = self.spec;
        let counts: Vec<usize> = spec
            .classes
            .iter()
            .map(|c| rng.random_range(c.count[0]..=c.count[1]))
            .collect();

        let (nx, ny) = spec.grid_cells(self.room);
        let origin = [
            (self.room[0] - nx as f64 * spec.cell_size) / 2.0,
            (self.room[1] - ny as f64 * spec.cell_size) / 2.0,
        ];
        let mut free: Vec<(usize, usize)> = (0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).collect();
        free.shuffle(rng);
        let mut taken: Vec<((usize, usize), usize)> = Vec::new();
        let jitter = 0.2 * spec.cell_size;
        // Classes placed beside others go second, so their anchors exist.
        let grid_classes = spec
            .classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.placement.on_grid() && c.beside.is_none())
            .chain(spec.classes.iter().enumerate().filter(|(_, c)| c.placement.on_grid() && c.beside.is_some()));
        for (ci, c) in grid_classes {
            for _ in 0..counts[ci] {
                let mut pick = None;
                if let Some(b) = &c.beside {
                    if rng.random_bool(b.prob) {
                        let adjacent: Vec<usize> = (0..free.len())
                            .filter(|&k| {
                                taken.iter().any(|(cell, class)| {
                                    b.classes.contains(&spec.classes[*class].name)
                                        && cell.0.abs_diff(free[k].0) <= 1
                                        && cell.1.abs_diff(free[k].1) <= 1
                                })
                            })
                            .collect();
                        pick = adjacent.choose(rng).copied();
                    }
                }
                if free.is_empty() {
                    return Err(Error::Generator("infeasible: out of floor-grid cells".into()));
                }
                let (i, j) = free.remove(pick.unwrap_or(free.len() - 1));
                taken.push(((i, j), ci));
                let pos = [
                    origin[0] + (i as f64 + 0.5) * spec.cell_size + rng.random_range(-jitter..=jitter),
                    origin[1] + (j as f64 + 0.5) * spec.cell_size + rng.random_range(-jitter..=jitter),
                    c.height,
                ];
                let state = self.random_state(ci, rng);
                self.insert(ci, pos, state, None);
            }
        }

        let nslots = spec.wall_slots(self.room);
        let perimeter = 2.0 * (self.room[0] + self.room[1]);
        let mut slots: Vec<usize> = (0..nslots).collect();
        slots.shuffle(rng);
        let mut slots = slots.into_iter();
        for (ci, c) in spec.classes.iter().enumerate().filter(|(_, c)| c.placement == Placement::Wall) {
            for _ in 0..counts[ci] {
                let t = slots
                    .next()
                    .ok_or_else(|| Error::Generator("infeasible: out of wall slots".into()))?;
                let xy = perimeter_point(self.room, (t as f64 + 0.5) * perimeter / nslots as f64);
                let state = self.random_state(ci, rng);
                self.insert(ci, [xy[0], xy[1], c.height], state, None);
            }
        }

        for (ci, c) in spec.classes.iter().enumerate() {
            for _ in 0..counts[ci] {
                match c.placement {
                    Placement::Surface => {
                        let free = self.free_supports(None);
                        let &support = free
                            .choose(rng)
                            .ok_or_else(|| Error::Generator("infeasible: supports are full".into()))?;
                        let pos = self.surface_spot(support, ci, rng);
                        let state = self.random_state(ci, rng);
                        self.insert(ci, pos, state, Some(support));
                    }
                    Placement::Floor => {
                        let pos = self.floor_spot(ci, rng);
                        let state = self.random_state(ci, rng);
                        self.insert(ci, pos, state, None);
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Observed scene: positions with noise, relations recomputed.
    fn observe<R: Rng>(&self, info: ScanInfo, tax: &Taxonomy, rng: &mut R) -> Result<SceneGraph> {
        let spec = self.spec;
        let noise = spec.position_noise;
        let nodes: Vec<ObjectNode> = self
            .objects
            .values()
            .map(|o| {
                let c = &spec.classes[o.class];
                let mut pos = o.pos;
                if noise > 0.0 {
                    for v in &mut pos {
                        *v += rng.random_range(-noise..=noise);
                    }
                }
                let attrs = c
                    .attributes
                    .iter()
                    .chain(&c.affordances)
                    .chain(o.state.map(|s| &c.states[s]))
                    .map(|n| tax.attribute_index(n))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ObjectNode::new(o.id, o.class, attrs, pos))
            })
            .collect::<Result<_>>()?;
        let standing_on = tax.relation_index(STANDING_ON)?;
        let supports = tax.relation_index(SUPPORTS)?;
        let close_by = tax.relation_index(CLOSE_BY)?;
        let mut edges = Vec::new();
        for o in self.objects.values() {
            if let Some(s) = o.support {
                edges.push(SemanticEdge::new(o.id, s, standing_on));
                edges.push(SemanticEdge::new(s, o.id, supports));
            }
        }
        let floor_level: Vec<&ObjectNode> = nodes
            .iter()
            .filter(|n| spec.classes[n.class_index].placement != Placement::Surface)
            .collect();
        for a in &floor_level {
            for b in &floor_level {
                if a.id != b.id && distance(&a.position, &b.position) < spec.near_radius {
                    edges.push(SemanticEdge::new(a.id, b.id, close_by));
                }
            }
        }
        SceneGraph::new(info, nodes, edges, tax)
    }

    fn effective(&self, o: &Obj, scan: &SceneGraph, close_by: usize) -> Propensity {
        let c = &self.spec.classes[o.class];
        let mut p = c.propensity;
        let holds = |cond: &Condition| match cond {
            Condition::On(t) => o
                .support
                .is_some_and(|s| self.spec.classes[self.objects[&s].class].name == *t),
            Condition::Near(t) => scan.semantic_edges().iter().any(|e| {
                e.source == o.id
                    && e.relation == close_by
                    && scan
                        .node(e.target)
                        .is_some_and(|n| self.spec.classes[n.class_index].name == *t)
            }),
        };
        if let Some(r) = c.rules.iter().find(|r| holds(&r.when)) {
            p.move_prob = r.move_prob.unwrap_or(p.move_prob);
            p.state_prob = r.state_prob.unwrap_or(p.state_prob);
            p.disappear_prob = r.disappear_prob.unwrap_or(p.disappear_prob);
        }
        p
    }

    fn relocate<R: Rng>(&self, o: &Obj, rng: &mut R) -> Option<(Vec3, Option<ObjectId>)> {
        let spec = self.spec;
        let c = &spec.classes[o.class];
        for _ in 0..MAX_PLACEMENT_TRIES {
            let (pos, support) = match c.placement {
                Placement::Surface => {
                    let free = self.free_supports(o.support);
                    let &s = free.choose(rng)?;
                    (self.surface_spot(s, o.class, rng), Some(s))
                }
                Placement::Floor => (self.floor_spot(o.class, rng), None),
                Placement::Furniture => {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let step = rng.random_range(spec.min_move..=3.0 * spec.min_move);
                    let x = (o.pos[0] + step * angle.cos()).clamp(WALL_MARGIN, self.room[0] - WALL_MARGIN);
                    let y = (o.pos[1] + step * angle.sin()).clamp(WALL_MARGIN, self.room[1] - WALL_MARGIN);
                    ([x, y, o.pos[2]], None)
                }
                Placement::Support | Placement::Wall => return None,
            };
            if self.far_from_history(&o.history, &pos) {
                return Some((pos, support));
            }
        }
        None
    }

    fn step<R: Rng>(&mut self, scan: &SceneGraph, tax: &Taxonomy, rng: &mut R) -> Result<Vec<ChangeEvent>> {
        let spec = self.spec;
        let close_by = tax.relation_index(CLOSE_BY)?;
        let mut events = Vec::new();
        let ids: Vec<ObjectId> = self.objects.keys().copied().collect();
        for id in ids {
            let o = self.objects[&id].clone();
            let p = self.effective(&o, scan, close_by);
            if p.disappear_prob > 0.0 && rng.random_bool(p.disappear_prob) {
                self.objects.remove(&id);
                events.push(ChangeEvent::Disappeared { id });
                continue;
            }
            if p.move_prob > 0.0 && rng.random_bool(p.move_prob) {
                if let Some((to, support)) = self.relocate(&o, rng) {
                    let obj = self.objects.get_mut(&id).expect("present");
                    obj.pos = to;
                    obj.support = support;
                    obj.history.push(to);
                    events.push(ChangeEvent::Moved { id, from: o.pos, to });
                } else {
                    log::debug!("object {id}: no admissible destination, move skipped");
                }
            }
            if p.state_prob > 0.0 && rng.random_bool(p.state_prob) {
                let states = &spec.classes[o.class].states;
                let from = o.state.expect("stateful class");
                let mut to = rng.random_range(0..states.len() - 1);
                if to >= from {
                    to += 1;
                }
                self.objects.get_mut(&id).expect("present").state = Some(to);
                events.push(ChangeEvent::StateChanged {
                    id,
                    from: states[from].clone(),
                    to: states[to].clone(),
                });
            }
        }
        for (ci, c) in spec.classes.iter().enumerate() {
            if c.propensity.appear_rate <= 0.0 {
                continue;
            }
            let k = Poisson::new(c.propensity.appear_rate)
                .map_err(|e| Error::Generator(e.to_string()))?
                .sample(rng) as usize;
            for _ in 0..k {
                let (pos, support) = match c.placement {
                    Placement::Surface => match self.free_supports(None).choose(rng) {
                        Some(&s) => (self.surface_spot(s, ci, rng), Some(s)),
                        None => break,
                    },
                    _ => (self.floor_spot(ci, rng), None),
                };
                let state = self.random_state(ci, rng);
                let id = self.insert(ci, pos, state, support);
                events.push(ChangeEvent::Appeared {
                    id,
                    class: c.name.clone(),
                    state: state.map(|s| c.states[s].clone()),
                });
            }
        }
        Ok(events)
    }
}

fn perimeter_point(room: [f64; 2], mut s: f64) -> [f64; 2] {
    let [w, d] = room;
    if s < w {
        return [s, 0.0];
    }
    s -= w;
    if s < d {
        return [w, s];
    }
    s -= d;
    if s < w {
        return [w - s, d];
    }
    s -= w;
    [0.0, (d - s).max(0.0)]
}

/// One environment: `scans_per_environment` scans and the log of every change.
pub fn generate_scene_sequence<R: Rng>(
    spec: &GeneratorSpec,
    tax: &Taxonomy,
    environment_id: &str,
    rng: &mut R,
) -> Result<(Vec<SceneGraph>, ChangeLog)> {
    let room = [
        rng.random_range(spec.room_min[0]..=spec.room_max[0]),
        rng.random_range(spec.room_min[1]..=spec.room_max[1]),
    ];
    let mut world = World {
        spec,
        room,
        objects: BTreeMap::new(),
        next_id: 1,
    };
    world.populate(rng)?;
    let initial = world
        .objects
        .values()
        .map(|o| ObjectRecord {
            id: o.id,
            class: spec.classes[o.class].name.clone(),
            state: o.state.map(|s| spec.classes[o.class].states[s].clone()),
        })
        .collect();
    let mut scans = Vec::with_capacity(spec.scans_per_environment);
    let mut transitions = Vec::new();
    for k in 0..spec.scans_per_environment {
        let info = ScanInfo {
            environment_id: environment_id.to_string(),
            scan_id: format!("{environment_id}_s{k}"),
            timestamp: k as u32,
            taxonomy_name: tax.name().to_string(),
        };
        let scan = world.observe(info, tax, rng)?;
        if k + 1 < spec.scans_per_environment {
            transitions.push(world.step(&scan, tax, rng)?);
        }
        scans.push(scan);
    }
    Ok((
        scans,
        ChangeLog {
            environment_id: environment_id.to_string(),
            initial,
            transitions,
        },
    ))
}

pub fn environment_id(index: usize) -> String {
    format!("env{index:04}")
}

/// A whole dataset. Environment `i` is generated from its own stream derived
/// from `(seed, i)`, so the result does not depend on thread scheduling.
pub fn generate_dataset(spec: &GeneratorSpec, seed: u64) -> Result<(Dataset, Vec<ChangeLog>)> {
    spec.validate()?;
    let tax = spec.taxonomy()?;
    let splits = assign_splits(spec.environments, spec.split, seed)?;
    let indices: Vec<usize> = (0..spec.environments).collect();
    let generated = par::try_map(Execution::Parallel, &indices, |&i| {
        let id = environment_id(i);
        generate_scene_sequence(spec, &tax, &id, &mut seeded(seed, &[0x6e4, i as u64]))
    })?;
    let mut environments = Vec::with_capacity(generated.len());
    let mut logs = Vec::with_capacity(generated.len());
    for ((scans, log), split) in generated.into_iter().zip(splits) {
        environments.push(Environment {
            id: log.environment_id.clone(),
            split,
            scans,
        });
        logs.push(log);
    }
    Ok((
        Dataset {
            taxonomy: tax,
            environments,
        },
        logs,
    ))
}

/// Writes the dataset plus `<root>/<environment>/changes.json` per environment.
pub fn save_generated(root: impl AsRef<Path>, dataset: &Dataset, logs: &[ChangeLog]) -> Result<()> {
    let root = root.as_ref();
    dataset.save(root)?;
    for log in logs {
        let path = root.join(&log.environment_id).join("changes.json");
        let mut text = serde_json::to_string_pretty(log).expect("change log serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_change_log(path: impl AsRef<Path>) -> Result<ChangeLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_labels, LabelConfig};

    fn small(mut spec: GeneratorSpec) -> GeneratorSpec {
        spec.environments = 4;
        spec.split = [0.5, 0.25, 0.25];
        spec
    }

    #[test]
    fn preset_is_valid() {
        GeneratorSpec::indoor().validate().unwrap();
        let text = GeneratorSpec::indoor().to_json_string();
        assert_eq!(GeneratorSpec::from_json_str(&text, "x").unwrap(), GeneratorSpec::indoor());
        let cluttered = GeneratorSpec::indoor_cluttered();
        cluttered.validate().unwrap();
        assert_eq!(cluttered.taxonomy().unwrap(), GeneratorSpec::indoor().taxonomy().unwrap());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = small(GeneratorSpec::indoor());
        let (a, la) = generate_dataset(&spec, 11).unwrap();
        let (b, lb) = generate_dataset(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate_dataset(&spec, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_propensities_freeze_the_scene() {
        let mut spec = small(GeneratorSpec::indoor());
        for c in &mut spec.classes {
            c.propensity = Propensity::default();
            c.rules.clear();
        }
        spec.position_noise = 0.0;
        let (ds, logs) = generate_dataset(&spec, 3).unwrap();
        assert!(logs.iter().all(|l| l.transitions.iter().all(|t| t.is_empty())));
        for env in &ds.environments {
            for s in &env.scans[1..] {
                assert_eq!(s.nodes(), env.scans[0].nodes());
                assert_eq!(s.semantic_edges(), env.scans[0].semantic_edges());
            }
        }
        let samples = ds.all_samples(&LabelConfig::default()).unwrap();
        assert!(samples.iter().all(|s| s.labels.iter().all(|l| !l.changed())));
    }

    #[test]
    fn certain_moves_always_register() {
        let mut spec = small(GeneratorSpec::indoor());
        for c in &mut spec.classes {
            if c.name == "cup" {
                c.propensity.move_prob = 1.0;
                c.rules.clear();
            }
        }
        let (ds, _) = generate_dataset(&spec, 5).unwrap();
        let cup = ds.taxonomy.class_index("cup").unwrap();
        let mut seen = 0;
        for env in &ds.environments {
            for (i, j) in [(0, 1), (1, 2)] {
                let labels = compute_labels(&env.scans[i], &env.scans[j], &ds.taxonomy, &LabelConfig::default())
                    .unwrap();
                for (n, l) in env.scans[i].nodes().iter().zip(&labels) {
                    if n.class_index == cup {
                        assert!(l.position);
                        seen += 1;
                    }
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = GeneratorSpec::indoor();
        spec.classes[4].count = [2, 40];
        assert!(matches!(spec.validate(), Err(Error::Generator(m)) if m.contains("infeasible")));
        let mut spec = GeneratorSpec::indoor();
        spec.classes[12].count = [1, 30];
        assert!(matches!(spec.validate(), Err(Error::Generator(m)) if m.contains("infeasible")));
        let mut spec = GeneratorSpec::indoor();
        spec.classes[0].propensity.move_prob = 0.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn perimeter_walk() {
        assert_eq!(perimeter_point([4.0, 3.0], 1.0), [1.0, 0.0]);
        assert_eq!(perimeter_point([4.0, 3.0], 5.0), [4.0, 1.0]);
        assert_eq!(perimeter_point([4.0, 3.0], 8.0), [3.0, 3.0]);
        assert_eq!(perimeter_point([4.0, 3.0], 13.0), [0.0, 1.0]);
    }
}
