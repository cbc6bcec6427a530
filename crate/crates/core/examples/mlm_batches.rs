//! Builds masked-LM plus next-sentence batches and tallies the masking split.

use tlmk::textpipe::{make_mlm_nsp_batch, special, MaskingRule};

fn main() -> tlmk::Result<()> {
    let sentences: Vec<Vec<usize>> = (0..50).map(|i| (0..8).map(|j| 5 + (i * 11 + j) % 90).collect()).collect();
    let batch = make_mlm_nsp_batch(&sentences, 96, 24, 8, MaskingRule::default(), 3)?;

    let row = batch.masked.iter().position(|m| !m.is_empty()).unwrap_or(0);
    println!("row {row} ids      {:?}", batch.ids[row]);
    println!("row {row} segments {:?}", batch.segments[row]);
    println!("row {row} targets  {:?}", batch.masked[row]);
    println!("is-next labels {:?}", batch.nsp);

    let (mut mask, mut random, mut same) = (0, 0, 0);
    for (row, picks) in batch.masked.iter().enumerate() {
        for &(pos, orig) in picks {
            match batch.ids[row][pos] {
                special::MASK => mask += 1,
                t if t == orig => same += 1,
                _ => random += 1,
            }
        }
    }
    println!("[MASK] {mask}, random {random}, unchanged {same}");
    Ok(())
}
