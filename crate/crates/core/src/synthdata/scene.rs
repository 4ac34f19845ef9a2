use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

pub const CANVAS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ellipse,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Circle,
        Category::Square,
        Category::Triangle,
        Category::Diamond,
        Category::Cross,
        Category::Ellipse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Circle => "circle",
            Category::Square => "square",
            Category::Triangle => "triangle",
            Category::Diamond => "diamond",
            Category::Cross => "cross",
            Category::Ellipse => "ellipse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
        }
    }

    /// 8-bit sRGB triple; rasters use `value / 255` so PNG round trips are exact.
    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 40],
            Color::Blue => [40, 70, 235],
            Color::Yellow => [240, 220, 30],
            Color::Purple => [150, 40, 200],
            Color::Cyan => [30, 210, 220],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Filled,
    Hollow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Large,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectState {
    pub size: Size,
    pub fill: Fill,
}

impl ObjectState {
    pub const ALL: [ObjectState; 4] = [
        ObjectState {
            size: Size::Large,
            fill: Fill::Filled,
        },
        ObjectState {
            size: Size::Large,
            fill: Fill::Hollow,
        },
        ObjectState {
            size: Size::Small,
            fill: Fill::Filled,
        },
        ObjectState {
            size: Size::Small,
            fill: Fill::Hollow,
        },
    ];

    pub fn phrase(self) -> &'static str {
        match (self.size, self.fill) {
            (Size::Large, Fill::Filled) => "large and filled",
            (Size::Large, Fill::Hollow) => "large and hollow",
            (Size::Small, Fill::Filled) => "small and filled",
            (Size::Small, Fill::Hollow) => "small and hollow",
        }
    }
}

/// Names of the 3×3 layout cells, row-major from the top left.
pub const CELL_PHRASES: [&str; 9] = [
    "the top left",
    "the top",
    "the top right",
    "the left",
    "the center",
    "the right",
    "the bottom left",
    "the bottom",
    "the bottom right",
];

/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(b: [f64; 4]) -> Self {
        Self {
            x: b[0],
            y: b[1],
            w: b[2],
            h: b[3],
        }
    }

    /// `(cx, cy, w, h)` normalized by the canvas size.
    pub fn normalized(self, width: f64, height: f64) -> [f64; 4] {
        [
            (self.x + self.w / 2.0) / width,
            (self.y + self.h / 2.0) / height,
            self.w / width,
            self.h / height,
        ]
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        let inter = ix.max(0.0) * iy.max(0.0);
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    pub color: Color,
    pub position_cell: u8,
    pub state: ObjectState,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub target_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Objects sharing the target's category, target included.
    pub same_category: usize,
    pub categories: Vec<Category>,
    pub palette: Vec<Color>,
    pub large_size: f64,
    pub small_size: f64,
    pub jitter: i32,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: CANVAS,
            min_objects: 3,
            max_objects: 5,
            same_category: 2,
            categories: Category::ALL.to_vec(),
            palette: Color::ALL.to_vec(),
            large_size: 18.0,
            small_size: 11.0,
            jitter: 1,
            max_retries: 64,
        }
    }
}

impl SceneSpec {
    pub fn target(&self) -> &SceneObject {
        &self.objects[self.target_index]
    }

    /// Objects other than the target that share its category.
    pub fn same_category_distractors(&self) -> impl Iterator<Item = &SceneObject> {
        let t = self.target_index;
        let cat = self.objects.get(t).map(|o| o.category);
        self.objects
            .iter()
            .enumerate()
            .filter(move |(i, o)| *i != t && Some(o.category) == cat)
            .map(|(_, o)| o)
    }

    /// Checks every structural invariant of a generated scene.
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidScene(format!("{}: {msg}", self.scene_id)));
        let Some(target) = self.objects.get(self.target_index) else {
            return fail("target index out of range".into());
        };
        let distractors: Vec<_> = self.same_category_distractors().collect();
        if distractors.is_empty() {
            return fail("no same-category distractor".into());
        }
        for d in &distractors {
            if d.color == target.color && d.position_cell == target.position_cell && d.state == target.state {
                return fail("distractor indistinguishable from target".into());
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            let b = o.bbox;
            if b.w <= 0.0
                || b.h <= 0.0
                || b.x < 0.0
                || b.y < 0.0
                || b.x + b.w > self.width as f64
                || b.y + b.h > self.height as f64
            {
                return fail(format!("object {i} box outside canvas"));
            }
            if o.position_cell > 8 {
                return fail(format!("object {i} cell {}", o.position_cell));
            }
            for p in &self.objects[i + 1..] {
                if o.bbox.iou(&p.bbox) > 0.1 {
                    return fail(format!("object {i} overlaps another (IoU > 0.1)"));
                }
            }
        }
        Ok(())
    }
}

/// Builds one scene; a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec, DataError> {
    validate_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..config.max_retries.max(1) {
        let scene = sample_scene(&mut rng, seed, config);
        match scene.validate() {
            Ok(()) => return Ok(scene),
            Err(e) => last_err = Some(e),
        }
    }
    Err(DataError::Unsatisfiable(format!(
        "seed {seed}: no valid scene after {} attempts ({})",
        config.max_retries.max(1),
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn validate_config(c: &SceneConfig) -> Result<(), DataError> {
    let bad = |m: &str| Err(DataError::Unsatisfiable(m.to_string()));
    if c.min_objects > c.max_objects || c.max_objects > 9 {
        return bad("object count range must lie within 1..=9");
    }
    if c.same_category < 2 {
        return bad("at least two objects must share the target's category");
    }
    if c.same_category > c.min_objects {
        return bad("same-category count exceeds minimum object count");
    }
    if c.palette.len() < 2 || c.categories.is_empty() {
        return bad("palette needs at least two colors and one category");
    }
    if c.categories.len() < 2 && c.min_objects > c.same_category {
        return bad("filler objects need a second category");
    }
    Ok(())
}

fn sample_scene(rng: &mut ChaCha8Rng, seed: u64, c: &SceneConfig) -> SceneSpec {
    let n = rng.gen_range(c.min_objects..=c.max_objects);
    let mut cells: Vec<u8> = (0..9).collect();
    cells.shuffle(rng);
    cells.truncate(n);

    let category = *c.categories.choose(rng).unwrap();
    let color = *c.palette.choose(rng).unwrap();
    let state = *ObjectState::ALL.choose(rng).unwrap();
    // Same-category distractors share one color and one state, both unlike the target's.
    let other_color = *c
        .palette
        .iter()
        .filter(|&&x| x != color)
        .collect::<Vec<_>>()
        .choose(rng)
        .unwrap();
    let other_state = *ObjectState::ALL
        .iter()
        .filter(|&&s| s != state)
        .collect::<Vec<_>>()
        .choose(rng)
        .unwrap();

    let mut specs = vec![(category, color, state)];
    specs.extend((1..c.same_category).map(|_| (category, *other_color, *other_state)));
    let fillers: Vec<Category> = c.categories.iter().copied().filter(|&x| x != category).collect();
    while specs.len() < n {
        let cat = *fillers.choose(rng).unwrap();
        specs.push((
            cat,
            *c.palette.choose(rng).unwrap(),
            *ObjectState::ALL.choose(rng).unwrap(),
        ));
    }

    let mut objects: Vec<SceneObject> = specs
        .into_iter()
        .zip(&cells)
        .map(|((category, color, state), &cell)| {
            let bbox = place(rng, c, category, state, cell);
            SceneObject {
                category,
                color,
                position_cell: cell,
                state,
                bbox,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(rng);
    let target_index = order.iter().position(|&i| i == 0).unwrap();
    let mut shuffled: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
    std::mem::swap(&mut objects, &mut shuffled);

    SceneSpec {
        scene_id: format!("scene-{seed:08}"),
        width: c.canvas,
        height: c.canvas,
        objects,
        target_index,
    }
}

fn place(rng: &mut ChaCha8Rng, c: &SceneConfig, category: Category, state: ObjectState, cell: u8) -> PixelBox {
    let size = match state.size {
        Size::Large => c.large_size,
        Size::Small => c.small_size,
    };
    let (w, h) = match category {
        Category::Ellipse => (size, (size * 0.6).round()),
        _ => (size, size),
    };
    let cell_w = c.canvas as f64 / 3.0;
    let (row, col) = ((cell / 3) as f64, (cell % 3) as f64);
    let jx = rng.gen_range(-c.jitter..=c.jitter) as f64;
    let jy = rng.gen_range(-c.jitter..=c.jitter) as f64;
    let x = ((col + 0.5) * cell_w - w / 2.0).round() + jx;
    let y = ((row + 0.5) * cell_w - h / 2.0).round() + jy;
    PixelBox { x, y, w, h }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let c = SceneConfig::default();
        assert_eq!(generate_scene(0, &c).unwrap(), generate_scene(0, &c).unwrap());
        assert_ne!(generate_scene(0, &c).unwrap(), generate_scene(1, &c).unwrap());
    }

    #[test]
    fn every_scene_has_a_distractor() {
        let c = SceneConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, &c).unwrap();
            assert!(s.same_category_distractors().count() >= 1);
            assert!((3..=5).contains(&s.objects.len()));
        }
    }

    #[test]
    fn thousand_seeds_without_violation() {
        let c = SceneConfig::default();
        for seed in 0..1000 {
            let s = generate_scene(seed, &c).unwrap();
            s.validate().unwrap();
        }
    }

    #[test]
    fn tiny_canvas_is_unsatisfiable() {
        let c = SceneConfig {
            canvas: 16,
            max_retries: 5,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &c), Err(DataError::Unsatisfiable(_))));
    }

    #[test]
    fn degenerate_configs_rejected() {
        let one_color = SceneConfig {
            palette: vec![Color::Red],
            ..SceneConfig::default()
        };
        assert!(generate_scene(0, &one_color).is_err());
        let lone = SceneConfig {
            same_category: 1,
            ..SceneConfig::default()
        };
        assert!(generate_scene(0, &lone).is_err());
    }
}
