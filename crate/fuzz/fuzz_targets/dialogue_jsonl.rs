#![no_main]

use hiersample::corpus::{parse_dialogues, write_dialogues, CorpusFormat};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for format in [CorpusFormat::JsonlDialogue, CorpusFormat::PlainTurns] {
        let Ok(dialogues) = parse_dialogues(data, format) else { continue };
        // whatever parses must survive a write/parse cycle unchanged
        let mut out = Vec::new();
        write_dialogues(&mut out, &dialogues).unwrap();
        let again = parse_dialogues(out.as_slice(), CorpusFormat::JsonlDialogue).unwrap();
        assert_eq!(again, dialogues);
    }
});
