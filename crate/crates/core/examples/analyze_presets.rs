//! Closed-form weights, activation peaks and operation counts for the
//! built-in presets.
//!
//!     cargo run --example analyze_presets

use tlmk::analyzer::analyze;
use tlmk::model::ModelConfig;

fn main() -> tlmk::Result<()> {
    for (name, config) in ModelConfig::presets() {
        let r = analyze(&config)?;
        println!("== {name}");
        print!("{}", r.to_text());
        println!();
    }
    Ok(())
}
