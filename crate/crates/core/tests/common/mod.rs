pub mod eval_fixture;
