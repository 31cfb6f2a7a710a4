// Placeholder main; the CLI is wired up in a later commit.
int main() { return 0; }
