//! The LM and content-aware losses on a tiny generator, a short training run, and greedy decoding.

use tabproto::generator::{ca_loss, generate, lm_loss, train_generator, GeneratorModel, GeneratorTrainConfig};
use tabproto::selector::AugmentedRecord;
use tabproto::tabledata::{linearize_table, Table, Vocabulary};
use tabproto::tokenize;

pub fn run_example() -> tabproto::Result<()> {
    let table = Table::from_pairs(&[("name", "vola kine"), ("genre", "tusa")])?;
    let reference = "vola kine is a tusa musician";
    let prototype = "deno rami is a tusa musician from pela";
    let vocab = Vocabulary::build([&linearize_table(&table), &tokenize(reference), &tokenize(prototype)]);
    let protos = [tokenize(prototype)];

    let model = GeneratorModel::init(vocab.clone(), 16, 48, 1)?;
    let x = model.conditioning(&table, &protos, 40)?;
    // "deno", "rami", "from" and "pela" occur only in the prototype; they make up the CA penalty set.
    println!("untrained: LM {:.4}, CA {:.4}", lm_loss(&model, &x, &tokenize(reference))?, ca_loss(&model, &x, &tokenize(reference), &protos)?);

    let record = AugmentedRecord {
        table_id: 1,
        table: table.clone(),
        prototype_ids: vec![10],
        prototypes: vec![prototype.to_string()],
        reference: reference.to_string(),
    };
    let config = GeneratorTrainConfig { d_model: 16, max_len: 48, max_decode_len: 12, epochs: 60, learning_rate: 1e-2, ..Default::default() };
    let (trained, log) = train_generator(vocab, &[record], &config)?;
    println!("trained {} epochs: loss {:.4} -> {:.4}", config.epochs, log.epoch_losses[0], log.epoch_losses.last().unwrap());
    let x = trained.conditioning(&table, &protos, 40)?;
    println!("trained: LM {:.4}, CA {:.4}", lm_loss(&trained, &x, &tokenize(reference))?, ca_loss(&trained, &x, &tokenize(reference), &protos)?);
    println!("greedy: {}", generate(&trained, &table, &protos, config.max_decode_len)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    run_example()
}
