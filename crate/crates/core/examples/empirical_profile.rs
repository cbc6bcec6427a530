//! Runs one instrumented forward pass and checks it against the closed forms.

use tlmk::analyzer::{analyze, compare_reports, divergences_to_text, empirical_profile};
use tlmk::model::{build_model, ModelConfig};

fn main() -> tlmk::Result<()> {
    let config = ModelConfig::embbert_q();
    let model = build_model(&config, 7)?;
    let tokens: Vec<usize> = (0..120).map(|i| 5 + (i * 97) % 8000).collect();

    let measured = empirical_profile(&model, &tokens)?;
    let formulas = analyze(&config)?;
    print!("{}", measured.to_text());
    print!("{}", divergences_to_text(&compare_reports(&formulas, &measured)?));
    Ok(())
}
