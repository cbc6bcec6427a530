//! Lists the configs that fit a memory budget, best first.
//!
//!     cargo run --example plan_budget -- 1048576

use tlmk::model::Arch;
use tlmk::planner::{candidates_to_text, enumerate_feasible, select_config, SearchSpace};

fn main() -> tlmk::Result<()> {
    let budget = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2 * 1024 * 1024);
    // FP8 weights, FP16 activations
    let space = SearchSpace { p_w: 1, p_a: 2, ..SearchSpace::with_budget(budget) };
    let feasible = enumerate_feasible(&space, Arch::EmbBert)?;
    println!("{} configs fit in {budget} B", feasible.len());
    print!("{}", candidates_to_text(&feasible, 10));
    println!("selected: {:?}", select_config(&feasible)?);
    Ok(())
}
