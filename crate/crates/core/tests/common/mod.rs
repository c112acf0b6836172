pub mod oracle;
pub mod problems;
