use std::fmt;

/// Failure class, printed with the message and mapped to the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Dataset,
    Checkpoint,
    Training,
    Io,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Dataset => "dataset",
            Category::Checkpoint => "checkpoint",
            Category::Training => "training",
            Category::Io => "io",
        }
    }

    /// 2 is left to argument parsing.
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 3,
            Category::Dataset => 4,
            Category::Checkpoint => 5,
            Category::Training => 6,
            Category::Io => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl fmt::Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }

    pub fn config(m: impl fmt::Display) -> Self {
        Self::new(Category::Config, m)
    }

    pub fn dataset(m: impl fmt::Display) -> Self {
        Self::new(Category::Dataset, m)
    }

    pub fn checkpoint(m: impl fmt::Display) -> Self {
        Self::new(Category::Checkpoint, m)
    }

    pub fn training(m: impl fmt::Display) -> Self {
        Self::new(Category::Training, m)
    }

    pub fn io(m: impl fmt::Display) -> Self {
        Self::new(Category::Io, m)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category.name(), self.message)
    }
}

impl std::error::Error for CliError {}
