//! Trains a byte-level BPE vocabulary, then encodes and decodes with it.

use tlmk::textpipe::{train_bpe, BpeVocab};

const CORPUS: &str = "the cat sat on the mat
the dog sat on the log
a cat and a dog met on the mat";

fn main() -> tlmk::Result<()> {
    let vocab = train_bpe(CORPUS.lines(), 64)?;
    println!("{} ids, {} in use, {} merges", vocab.size(), vocab.used(), vocab.merge_count());
    for i in 0..vocab.merge_count().min(8) {
        let (a, b) = vocab.merge(i);
        println!("merge {i}: {:?} + {:?}", String::from_utf8_lossy(a), String::from_utf8_lossy(b));
    }

    let ids = vocab.encode("the cat met the dog");
    println!("ids {ids:?}");
    println!("text {:?}", vocab.decode(&ids));

    let reloaded = BpeVocab::from_text(&vocab.to_text())?;
    assert_eq!(reloaded.encode("the cat met the dog"), ids);
    Ok(())
}
