// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Transcript files for `memfly ingest`.
//!
//! One item per line: a turn object (`speaker`, `text`, optional `turn_id`
//! and `date`), a session object with a `turns` array, or plain
//! `Speaker: text`.

use std::path::Path;

use memfly_core::construction::Turn;
use memfly_core::eval::Session;
use serde::Deserialize;

use crate::CliError;

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Session(Session),
    Turn(Turn),
}

pub fn parse_transcript(text: &str) -> Result<Vec<Turn>, CliError> {
    let mut turns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            match serde_json::from_str::<Line>(line) {
                Ok(Line::Session(s)) => turns.extend(s.turns.into_iter().map(Turn::from)),
                Ok(Line::Turn(t)) => turns.push(t),
                Err(e) => return Err(CliError::Input(format!("line {}: {e}", i + 1))),
            }
        } else {
            let (speaker, said) = line
                .split_once(':')
                .ok_or_else(|| CliError::Input(format!("line {}: expected `Speaker: text`", i + 1)))?;
            turns.push(Turn::new(speaker.trim(), said.trim()));
        }
    }
    Ok(turns)
}

pub fn load_transcript(path: &Path) -> Result<Vec<Turn>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_transcript(&text)
}
