// CLI entry point; subcommands are wired up in src/cli.cpp as modules land.
int main() { return 0; }
