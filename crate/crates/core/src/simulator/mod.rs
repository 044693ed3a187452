//! Labeled synthetic driving episodes generated from an executable Scm.
//!
//! Every episode carries its ground-truth cause by construction, a rendered
//! clip in which each environment factor paints a known spatial region, and
//! template captions over a closed vocabulary. A spurious factor (one with
//! no causal effect on any mechanism) can be planted so that its rendered
//! pattern co-occurs with the action — the testbed for attention-attribution
//! experiments.

mod caption;
mod episode;
mod generate;
mod io;
mod render;

pub use caption::template_caption;
pub use episode::{Episode, ScenarioConfig, Signal, SimError, SpuriousPlan};
pub use generate::{generate_dataset, generate_episode, inject_spurious, replay_matches};
pub use io::{read_dataset, write_dataset, CDRV_VERSION};
pub use render::{ego_region, factor_region, grid_cells, render_clip, CELL};
