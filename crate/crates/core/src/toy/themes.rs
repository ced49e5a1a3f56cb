//! Themed 2-D point distributions and their captions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    TwoMoons,
    ConcentricRings,
    Grid,
    Spiral,
    GaussianMixture,
    Checkerboard,
}

impl Generator {
    pub const ALL: [Generator; 6] = [
        Generator::TwoMoons,
        Generator::ConcentricRings,
        Generator::Grid,
        Generator::Spiral,
        Generator::GaussianMixture,
        Generator::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::TwoMoons => "two-moons",
            Generator::ConcentricRings => "concentric-rings",
            Generator::Grid => "grid",
            Generator::Spiral => "spiral",
            Generator::GaussianMixture => "gaussian-mixture",
            Generator::Checkerboard => "checkerboard",
        }
    }

    /// Natural-language noun phrase used in captions.
    pub fn phrase(self) -> &'static str {
        match self {
            Generator::TwoMoons => "two interlocking moons",
            Generator::ConcentricRings => "concentric rings",
            Generator::Grid => "a square grid of dots",
            Generator::Spiral => "a single spiral arm",
            Generator::GaussianMixture => "a ring of gaussian blobs",
            Generator::Checkerboard => "a checkerboard pattern",
        }
    }

    /// One draw from the unit-scale distribution, roughly inside `[-2, 2]²`.
    pub fn sample(self, rng: &mut SeededRng) -> [f64; 2] {
        use std::f64::consts::PI;
        match self {
            Generator::TwoMoons => {
                let a = PI * rng.uniform();
                let (x, y) = if rng.below(2) == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                [
                    1.4 * (x - 0.5) + 0.05 * rng.normal(),
                    1.4 * (y - 0.25) + 0.05 * rng.normal(),
                ]
            }
            Generator::ConcentricRings => {
                let r = if rng.below(2) == 0 { 0.6 } else { 1.5 };
                let a = 2.0 * PI * rng.uniform();
                [
                    r * a.cos() + 0.05 * rng.normal(),
                    r * a.sin() + 0.05 * rng.normal(),
                ]
            }
            Generator::Grid => {
                let i = rng.below(4) as f64;
                let j = rng.below(4) as f64;
                [i - 1.5 + 0.07 * rng.normal(), j - 1.5 + 0.07 * rng.normal()]
            }
            Generator::Spiral => {
                let u = rng.uniform();
                let r = 0.2 + 1.6 * u;
                let a = 3.0 * PI * u;
                [
                    r * a.cos() + 0.05 * rng.normal(),
                    r * a.sin() + 0.05 * rng.normal(),
                ]
            }
            Generator::GaussianMixture => {
                let a = 2.0 * PI * rng.below(8) as f64 / 8.0;
                [
                    1.5 * a.cos() + 0.15 * rng.normal(),
                    1.5 * a.sin() + 0.15 * rng.normal(),
                ]
            }
            Generator::Checkerboard => {
                // 8 of the 16 cells of a 4×4 board over [-2, 2]².
                let cell = rng.below(8);
                let row = cell / 2;
                let col = 2 * (cell % 2) + (row % 2);
                [
                    col as f64 - 2.0 + rng.uniform(),
                    row as f64 - 2.0 + rng.uniform(),
                ]
            }
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Generator::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown generator {s:?}")))
    }
}

/// Affine change applied to a generator's samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variation {
    Plain,
    Compact,
    Stretched,
    Shifted,
}

impl Variation {
    /// The variations used for adapters; `Plain` is what the base model sees.
    pub const ADAPTED: [Variation; 3] =
        [Variation::Compact, Variation::Stretched, Variation::Shifted];

    pub fn name(self) -> &'static str {
        match self {
            Variation::Plain => "plain",
            Variation::Compact => "compact",
            Variation::Stretched => "stretched",
            Variation::Shifted => "shifted",
        }
    }

    pub fn apply(self, p: [f64; 2]) -> [f64; 2] {
        match self {
            Variation::Plain => p,
            Variation::Compact => [0.55 * p[0], 0.55 * p[1]],
            Variation::Stretched => [1.45 * p[0], 0.6 * p[1]],
            Variation::Shifted => [p[0] + 0.9, p[1] - 0.7],
        }
    }
}

impl FromStr for Variation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Variation::Plain,
            Variation::Compact,
            Variation::Stretched,
            Variation::Shifted,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::arg(format!("unknown variation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeSpec {
    pub theme_id: String,
    pub generator: Generator,
    pub variation: Variation,
    /// Templates with `{shape}` and `{style}` placeholders.
    pub caption_templates: Vec<String>,
}

const TRAIN_TEMPLATES: [&str; 4] = [
    "{style} {shape}",
    "points forming {shape}, {style}",
    "a {style} scatter of {shape}",
    "{shape} drawn in a {style} layout",
];

const HELDOUT_TEMPLATES: [&str; 2] = [
    "a plot of {shape} that looks {style}",
    "{style} version of {shape}",
];

fn style_words(v: Variation) -> &'static str {
    match v {
        Variation::Plain => "plain",
        Variation::Compact => "compact small",
        Variation::Stretched => "stretched wide",
        Variation::Shifted => "shifted offset",
    }
}

impl ThemeSpec {
    pub fn new(generator: Generator, variation: Variation) -> Self {
        Self {
            theme_id: format!("{}.{}", generator.name(), variation.name()),
            generator,
            variation,
            caption_templates: TRAIN_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.caption_templates.is_empty() {
            return Err(Error::arg(format!(
                "theme {} has no caption templates",
                self.theme_id
            )));
        }
        Ok(())
    }

    pub fn fill(&self, template: &str) -> String {
        template
            .replace("{shape}", self.generator.phrase())
            .replace("{style}", style_words(self.variation))
    }

    /// The prompt the generator is conditioned on.
    pub fn prompt(&self) -> String {
        match self.variation {
            Variation::Plain => self.generator.phrase().to_string(),
            v => format!("{} {}", style_words(v), self.generator.phrase()),
        }
    }

    pub fn train_captions(&self) -> Vec<String> {
        self.caption_templates
            .iter()
            .map(|t| self.fill(t))
            .collect()
    }

    pub fn heldout_captions(&self) -> Vec<String> {
        HELDOUT_TEMPLATES.iter().map(|t| self.fill(t)).collect()
    }

    pub fn sample(&self, rng: &mut SeededRng) -> [f64; 2] {
        self.variation.apply(self.generator.sample(rng))
    }
}

/// Samples of one theme together with the prompt they are generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub theme_id: String,
    pub caption: String,
    /// `n × 2`
    pub points: Tensor,
}

pub fn make_dataset(theme: &ThemeSpec, n: usize, seed: u64) -> Result<ToyDataset> {
    theme.validate()?;
    if n == 0 {
        return Err(Error::arg("dataset size must be positive"));
    }
    let mut rng = SeededRng::derive(seed, &theme.theme_id);
    let data = (0..n).flat_map(|_| theme.sample(&mut rng)).collect();
    Ok(ToyDataset {
        theme_id: theme.theme_id.clone(),
        caption: theme.prompt(),
        points: Tensor::matrix(n, 2, data)?,
    })
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    x: [f64; 2],
    caption: String,
}

pub fn write_dataset_jsonl(path: impl AsRef<std::path::Path>, ds: &ToyDataset) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..ds.points.rows() {
        let p = ds.points.row(r);
        let rec = PointRecord {
            x: [p[0], p[1]],
            caption: ds.caption.clone(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset_jsonl(path: impl AsRef<std::path::Path>, theme_id: &str) -> Result<ToyDataset> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut data = Vec::new();
    let mut caption = None;
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PointRecord = serde_json::from_str(&line)?;
        match &caption {
            None => caption = Some(rec.caption),
            Some(c) if *c != rec.caption => return Err(Error::arg("dataset mixes captions")),
            Some(_) => {}
        }
        data.extend(rec.x);
    }
    let caption = caption.ok_or_else(|| Error::arg("empty dataset file"))?;
    Ok(ToyDataset {
        theme_id: theme_id.to_string(),
        caption,
        points: Tensor::matrix(data.len() / 2, 2, data)?,
    })
}

/// `x,y` CSV of sample points.
pub fn write_samples_csv(path: impl AsRef<std::path::Path>, points: &Tensor) -> Result<()> {
    let mut s = String::from("x,y\n");
    for r in 0..points.rows() {
        let p = points.row(r);
        s.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    std::fs::write(path, s)?;
    Ok(())
}
