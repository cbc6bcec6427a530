//! Parses a TSV dataset and derives train/validation/test splits.

use tlmk::textpipe::{label_set, parse_tsv, split_dataset, to_tsv, OfficialSplits};

fn main() -> tlmk::Result<()> {
    let mut text = String::new();
    for i in 0..40 {
        let label = if i % 3 == 0 { "spam" } else { "ham" };
        text.push_str(&format!("{label}\tmessage number {i}\n"));
    }
    let records = parse_tsv(&text)?;
    println!("labels {:?}", label_set(&records));

    let splits = split_dataset(OfficialSplits::None(records), 42)?;
    println!("train {} / val {} / test {}", splits.train.len(), splits.val.len(), splits.test.len());
    print!("test split:\n{}", to_tsv(&splits.test));
    Ok(())
}
