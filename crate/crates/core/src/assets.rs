//! Bundled example pipelines and their calibrated mock scripts, compiled
//! into the library so the benchmarks run offline.

pub const UC1_PIPELINE: &str = include_str!("../assets/uc1.json");
pub const UC2_PIPELINE: &str = include_str!("../assets/uc2.json");
pub const UC1_SCRIPT: &str = include_str!("../assets/uc1-script.json");
pub const UC2_SCRIPT: &str = include_str!("../assets/uc2-script.json");

pub fn bundled_pipeline(name: &str) -> Option<&'static str> {
    match name {
        "uc1" => Some(UC1_PIPELINE),
        "uc2" => Some(UC2_PIPELINE),
        _ => None,
    }
}

pub fn bundled_script(name: &str) -> Option<&'static str> {
    match name {
        "uc1-script" => Some(UC1_SCRIPT),
        "uc2-script" => Some(UC2_SCRIPT),
        _ => None,
    }
}
