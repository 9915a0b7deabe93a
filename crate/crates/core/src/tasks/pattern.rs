//! Size-pattern completion: a centred disc cycles large → medium → small;
//! the final frame must show the next size in the cycle.

use cost_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::{Channel, HIGH, LOW};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Large,
    Medium,
    Small,
}

impl SizeClass {
    pub const CYCLE: [SizeClass; 3] = [SizeClass::Large, SizeClass::Medium, SizeClass::Small];

    /// Squared radius of the disc.
    fn radius_sq(self) -> usize {
        match self {
            SizeClass::Large => 4,
            SizeClass::Medium => 1,
            SizeClass::Small => 0,
        }
    }

    pub fn next(self) -> SizeClass {
        let i = Self::CYCLE.iter().position(|&c| c == self).expect("in cycle");
        Self::CYCLE[(i + 1) % 3]
    }

    /// Class whose disc area is closest to `cells` lit cells on a 5×5 grid
    /// (13, 5 and 1 cells).
    pub fn from_area(cells: usize) -> SizeClass {
        if cells >= 9 {
            SizeClass::Large
        } else if cells >= 3 {
            SizeClass::Medium
        } else {
            SizeClass::Small
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub size: usize,
    pub shown: Vec<SizeClass>,
    pub hidden: SizeClass,
}

/// The class that continues a shown prefix of the cycle.
pub fn continue_cycle(shown: &[SizeClass]) -> Result<SizeClass> {
    let first = *shown.first().ok_or_else(|| Error::Task("empty pattern".into()))?;
    let mut expect = first;
    for &s in shown {
        if s != expect {
            return Err(Error::Task(format!("{shown:?} does not follow the size cycle")));
        }
        expect = expect.next();
    }
    Ok(expect)
}

pub fn gen_pattern_spec(rng: &mut Rng, frames: usize) -> Result<PatternSpec> {
    if frames < 4 {
        return Err(Error::Task(format!("pattern needs at least 4 frames, got {frames}")));
    }
    let phase = rng.below(3);
    let shown: Vec<SizeClass> = (0..frames - 1).map(|i| SizeClass::CYCLE[(phase + i) % 3]).collect();
    let hidden = continue_cycle(&shown)?;
    Ok(PatternSpec { size: 5, shown, hidden })
}

pub fn render_pattern(spec: &PatternSpec) -> Result<Tensor<f32>> {
    let g = spec.size;
    let c = Channel::COUNT;
    let centre = (g / 2) as isize;
    let frames: Vec<SizeClass> = spec.shown.iter().copied().chain([spec.hidden]).collect();
    let mut data = vec![LOW; frames.len() * g * g * c];
    for (f, class) in frames.iter().enumerate() {
        for r in 0..g {
            for col in 0..g {
                let (dr, dc) = (r as isize - centre, col as isize - centre);
                if (dr * dr + dc * dc) as usize <= class.radius_sq() {
                    data[((f * g + r) * g + col) * c + Channel::Wall as usize] = HIGH;
                }
            }
        }
    }
    Ok(Tensor::new([frames.len(), g, g, c], data)?)
}

/// Size class of the last frame, from the number of positive shape cells.
pub fn decode_final_size(video: &Tensor<f32>) -> Result<SizeClass> {
    let s = video.shape();
    if s.len() != 4 || s[3] != Channel::COUNT {
        return Err(Error::Shape(format!("pattern video must be (F, G, G, {}), got {s:?}", Channel::COUNT)));
    }
    let per = s[1] * s[2] * s[3];
    let last = &video.data()[(s[0] - 1) * per..];
    let lit = last.chunks(s[3]).filter(|px| px[Channel::Wall as usize] > 0.0).count();
    Ok(SizeClass::from_area(lit))
}
