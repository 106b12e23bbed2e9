// Mock static analyzer implementing the validator contract: one diagnostic
// per line as "line:rule_id", exit 0. Flags every line containing the word
// "debugger" with the rule no-debugger.

#include <fstream>
#include <iostream>
#include <string>

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: mock_lint <file>\n";
        return 2;
    }
    std::ifstream in(argv[1], std::ios::binary);
    if (!in) {
        std::cerr << "mock_lint: cannot open " << argv[1] << "\n";
        return 2;
    }
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find("debugger") != std::string::npos)
            std::cout << line_no << ":no-debugger\n";
    }
    return 0;
}
