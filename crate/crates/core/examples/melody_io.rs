//! Note lists, frame tracks and the three melody file formats.

use tunesmith::melody::{read_json, read_records, read_smf, write_json, write_records, write_smf, MidiSequence};
use tunesmith::midi_stage::{decode_midi_tokens, encode_midi_tokens, MAX_FRAMES};

fn main() -> tunesmith::Result<()> {
    let m = MidiSequence::from_pairs(&[(60, 12), (62, 6), (64, 18), (64, 6), (67, 24)])?;
    let e = m.expand()?;
    println!("{} notes, {} frames ({:.2} s), mean pitch {:.2}", m.len(), e.len(), m.total_seconds(), m.average_pitch()?);
    println!("compressed back: {:?}", e.compress()?.pairs());
    println!("up a fourth: {:?}", m.transpose(5)?.pairs());
    println!("on the 1/16 grid at 100 bpm: {:?}", m.round_to_grid(100.0)?.pairs());

    let tokens = encode_midi_tokens(&m, MAX_FRAMES)?;
    println!("(pitch, end offset) tokens: {:?}", tokens.steps());
    assert_eq!(decode_midi_tokens(&tokens, m.frame_rate_hz())?, m);

    let dir = std::env::temp_dir();
    write_json(&m, dir.join("melody.json"))?;
    write_smf(&m, dir.join("melody.mid"))?;
    let records = write_records(&m);
    print!("records:\n{records}");
    assert_eq!(read_json(dir.join("melody.json"))?, m);
    assert_eq!(read_smf(dir.join("melody.mid"))?, m);
    assert_eq!(read_records(&records)?, m);
    Ok(())
}
