//! Dataset construction: manifests, synthetic generation, filtering and
//! sampling builders, prompt templates and forget-set assembly.

mod builders;
mod forget;
mod manifest;
pub mod presets;
mod prompts;
mod synth;

pub use builders::{build_breed_style, filter_compcars_style, BuildOutcome, CompcarsRules};
pub use forget::{assemble_forget_dataset, ForgetRecord, ForgetSet};
pub use manifest::{DatasetManifest, Input, LabeledSet, Record, Split};
pub use prompts::{load_prompts, COMPCARS_TEMPLATES, IMGNETDOGS_TEMPLATES};
pub use synth::{generate_general_suite, generate_shifted_split, generate_synthetic, SynthSpec};
