//! Float formatting shared by every emitter.
//!
//! All floats leave the program with 9 significant digits so repeated runs
//! diff cleanly.

pub fn sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    format!("{x:.8e}")
}
