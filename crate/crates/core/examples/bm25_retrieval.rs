//! Index a small corpus, retrieve candidates for a table, and drop leaked references.

use tabproto::retrieval::{build_index, filter_leakage, retrieve, InvertedIndex};
use tabproto::tabledata::{linearize_table, Corpus, Sentence, Table};

pub fn run_example() -> tabproto::Result<()> {
    let corpus = Corpus::new(vec![
        Sentence::new(1, "The Absence is a melodic death metal band from Tampa, Florida."),
        Sentence::new(2, "Tampa weather tonight: rain, rain and more rain."),
        Sentence::new(3, "Obituary is a death metal band formed in Tarpon Springs."),
        Sentence::new(4, "Florida metal fans sold out the Tampa show."),
        Sentence::new(5, "A quiet string quartet from Vienna."),
    ])?;
    let index = build_index(&corpus);
    let table = Table::from_pairs(&[("Name", "The Absence"), ("Genre", "melodic death metal"), ("Origin", "Tampa")])?;
    println!("query: {}", linearize_table(&table));

    let candidates = retrieve(&index, &table, 7, 10)?;
    for c in &candidates.entries {
        println!("  {:>7.4}  {}", c.score, corpus.sentence(c.sentence_id)?.text);
    }

    // The first sentence is this table's gold reference, so it cannot serve as a prototype.
    let reference = "The Absence is a melodic death metal band from Tampa, Florida.";
    let kept = filter_leakage(&candidates, &corpus, reference)?;
    println!("after leakage filter: {:?}", kept.ids());

    let path = std::env::temp_dir().join("tabproto-example-index.json");
    index.save(&path)?;
    let reloaded = InvertedIndex::load(&path)?;
    assert_eq!(retrieve(&reloaded, &table, 7, 10)?, candidates);
    println!("index round-trips through {}", path.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    run_example()
}
