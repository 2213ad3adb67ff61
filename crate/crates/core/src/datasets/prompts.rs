//! Built-in prompt template lists and loading of user template files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::PromptSet;

/// Templates used for the car-model dataset.
pub const COMPCARS_TEMPLATES: [&str; 8] = [
    "a photo of a {}",
    "a photo of the {}",
    "a photo of my {}",
    "i love my {}!",
    "a photo of my dirty {}",
    "a photo of my clean {}",
    "a photo of my new {}",
    "a photo of my old {}",
];

/// Templates used for the dog-breed dataset.
pub const IMGNETDOGS_TEMPLATES: [&str; 80] = [
    "a bad photo of a {}",
    "a photo of many {}",
    "a sculpture of a {}",
    "a photo of the hard to see {}",
    "a low resolution photo of the {}",
    "a rendering of a {}",
    "graffiti of a {}",
    "a bad photo of the {}",
    "a cropped photo of the {}",
    "a tattoo of a {}",
    "the embroidered {}",
    "a photo of a hard to see {}",
    "a bright photo of a {}",
    "a photo of a clean {}",
    "a photo of a dirty {}",
    "a dark photo of the {}",
    "a drawing of a {}",
    "a photo of my {}",
    "the plastic {}",
    "a photo of the cool {}",
    "a close-up photo of a {}",
    "a black and white photo of the {}",
    "a painting of the {}",
    "a painting of a {}",
    "a pixelated photo of the {}",
    "a sculpture of the {}",
    "a bright photo of the {}",
    "a cropped photo of a {}",
    "a plastic {}",
    "a photo of the dirty {}",
    "a jpeg corrupted photo of a {}",
    "a blurry photo of the {}",
    "a photo of the {}",
    "a good photo of the {}",
    "a rendering of the {}",
    "a {} in a video game",
    "a photo of one {}",
    "a doodle of a {}",
    "a close-up photo of the {}",
    "a photo of a {}",
    "the origami {}",
    "the {} in a video game",
    "a sketch of a {}",
    "a doodle of the {}",
    "an origami {}",
    "a low resolution photo of a {}",
    "the toy {}",
    "a rendition of the {}",
    "a photo of the clean {}",
    "a photo of a large {}",
    "a rendition of a {}",
    "a photo of a nice {}",
    "a photo of a weird {}",
    "a blurry photo of a {}",
    "a cartoon {}",
    "art of a {}",
    "a sketch of the {}",
    "an embroidered {}",
    "a pixelated photo of a {}",
    "itap of the {}",
    "a jpeg corrupted photo of the {}",
    "a good photo of a {}",
    "a plushie {}",
    "a photo of the nice {}",
    "a photo of the small {}",
    "a photo of the weird {}",
    "the cartoon {}",
    "art of the {}",
    "a drawing of the {}",
    "a photo of the large {}",
    "a black and white photo of a {}",
    "the plushie {}",
    "a dark photo of a {}",
    "itap of a {}",
    "graffiti of the {}",
    "a toy {}",
    "itap of my {}",
    "a photo of a cool {}",
    "a photo of a small {}",
    "a tattoo of the {}",
];

/// Returns a built-in prompt set by name (`compcars`, `imgnetdogs`) or reads
/// one template per line from a file. Blank lines and `#` comments are skipped.
pub fn load_prompts(name: &str) -> Result<PromptSet> {
    match name.to_ascii_lowercase().as_str() {
        "compcars" | "compcars-s" => return PromptSet::new(COMPCARS_TEMPLATES),
        "imgnetdogs" => return PromptSet::new(IMGNETDOGS_TEMPLATES),
        _ => {}
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "`{name}` is neither a built-in prompt set nor a readable file"
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let templates: Vec<&str> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .collect();
    PromptSet::new(templates).map_err(|e| Error::parse(path, e.to_string()))
}
