//! Classification and regression metrics.

use tlmk::trainer::{classification_metrics, regression_metrics};

fn main() -> tlmk::Result<()> {
    let truth = [0, 0, 1, 1, 2, 2, 2, 1];
    let pred = [0, 1, 1, 1, 2, 0, 2, 1];
    let m = classification_metrics(&pred, &truth, 3)?;
    println!("accuracy {:.3}  macro-F1 {:.3}  MCC {:.3}", m.accuracy.unwrap(), m.macro_f1.unwrap(), m.mcc.unwrap());
    println!("confusion (true x predicted) {:?}", m.confusion.unwrap());

    let gold = [0.1, 0.4, 0.4, 0.9, 1.5];
    let guess = [0.0, 0.2, 0.5, 0.7, 3.0];
    println!("Spearman {:.3}", regression_metrics(&guess, &gold)?.scc.unwrap());
    Ok(())
}
