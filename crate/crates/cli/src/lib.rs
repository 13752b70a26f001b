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

//! Command-line and HTTP front end for the memfly memory engine.

pub mod app;
pub mod config;
pub mod service;
pub mod transcript;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for usage, configuration and input problems, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
