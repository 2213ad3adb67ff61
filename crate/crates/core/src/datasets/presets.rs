//! Named unlearning requests for the dog-breed and car-model datasets.
//!
//! Class identifiers are the display names; taxonomy files meant for these
//! presets must use the same strings as fine ids.

use crate::error::{Error, Result};
use crate::taxonomy::UnlearnRequest;

pub const COMPCARS: &[&str] = &[
    "Acura MDX",
    "Lexus RX",
    "Jaguar XK",
    "MINI CABRIO",
    "Audi A7",
    "Audi A5 coupe",
    "Cadillac SRX",
    "Corvette",
    "Mustang",
];

pub const IMGNETDOGS_DIFFICULT: &[&str] = &[
    "German short-haired pointer",
    "Boston terrier",
    "West Highland white terrier",
    "Labrador retriever",
    "golden retriever",
    "German shepherd dog",
    "keeshond",
    "Samoyed",
    "Pomeranian",
    "Border terrier",
];

pub const IMGNETDOGS_MEDIUM: &[&str] = &[
    "Irish setter",
    "Gordon setter",
    "basset hound",
    "Airedale terrier",
    "Shih-Tzu",
    "miniature pinscher",
    "Alaskan malamute",
    "flat-coated retriever",
    "Chesapeake Bay retriever",
    "Sealyham terrier",
];

pub const IMGNETDOGS_EASY: &[&str] = &[
    "English setter",
    "beagle",
    "whippet",
    "Ibizan hound",
    "Dandie Dinmont terrier",
    "standard poodle",
    "Border collie",
    "Blenheim spaniel",
    "cairn terrier",
    "Doberman",
    "groenendael",
];

pub const PRESET_NAMES: &[&str] = &[
    "compcars",
    "imgnetdogs-difficult",
    "imgnetdogs-medium",
    "imgnetdogs-easy",
];

pub fn request_preset(name: &str) -> Result<UnlearnRequest> {
    let classes = match name {
        "compcars" => COMPCARS,
        "imgnetdogs-difficult" => IMGNETDOGS_DIFFICULT,
        "imgnetdogs-medium" => IMGNETDOGS_MEDIUM,
        "imgnetdogs-easy" => IMGNETDOGS_EASY,
        other => {
            return Err(Error::Config(format!(
                "unknown request preset `{other}` (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(UnlearnRequest::fine(classes.iter().copied()))
}
