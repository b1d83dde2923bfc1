// SPDX-License-Identifier: Apache-2.0
#include "cobo/tasks.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace cobo {

namespace {

// Token ids for the arith vocab, in vocab order.
enum ArithTok : std::size_t {
    kPad = 0,
    kVarX = 1,
    kPlus = 2,
    kStar = 3,
    kSin = 4,
    kOne = 5,
    kTwo = 6,
    kThree = 7,
    kSlash = 8,
    kLParen = 9,
    kRParen = 10,
};

constexpr std::size_t kArithT = 12;

struct AstNode {
    enum Kind { kConst, kVar, kAdd, kMul, kDiv, kSinOp } kind;
    double cval = 0.0;
    int a = -1;
    int b = -1;
};

// Recursive-descent parser over the fixed precedence grammar:
//   expr   := term ('+' term)*
//   term   := factor (('*'|'/') factor)*
//   factor := 'x' | '1' | '2' | '3' | '(' expr ')' | 'sin' '(' expr ')'
// Pad tokens may only trail the expression.
class ArithParser {
public:
    ArithParser(const SequenceX& toks, std::size_t len) : toks_(toks), len_(len) {}

    int parse_expr(std::vector<AstNode>& ast) {
        int left = parse_term(ast);
        if (left < 0) return -1;
        while (pos_ < len_ && toks_[pos_] == kPlus) {
            ++pos_;
            int right = parse_term(ast);
            if (right < 0) return -1;
            ast.push_back({AstNode::kAdd, 0.0, left, right});
            left = static_cast<int>(ast.size()) - 1;
        }
        return left;
    }

    std::size_t pos() const { return pos_; }

private:
    int parse_term(std::vector<AstNode>& ast) {
        int left = parse_factor(ast);
        if (left < 0) return -1;
        while (pos_ < len_ && (toks_[pos_] == kStar || toks_[pos_] == kSlash)) {
            const bool mul = toks_[pos_] == kStar;
            ++pos_;
            int right = parse_factor(ast);
            if (right < 0) return -1;
            ast.push_back({mul ? AstNode::kMul : AstNode::kDiv, 0.0, left, right});
            left = static_cast<int>(ast.size()) - 1;
        }
        return left;
    }

    int parse_factor(std::vector<AstNode>& ast) {
        if (pos_ >= len_) return -1;
        const std::size_t t = toks_[pos_];
        if (t == kVarX) {
            ++pos_;
            ast.push_back({AstNode::kVar, 0.0, -1, -1});
            return static_cast<int>(ast.size()) - 1;
        }
        if (t == kOne || t == kTwo || t == kThree) {
            ++pos_;
            const double v = t == kOne ? 1.0 : t == kTwo ? 2.0 : 3.0;
            ast.push_back({AstNode::kConst, v, -1, -1});
            return static_cast<int>(ast.size()) - 1;
        }
        if (t == kLParen) {
            ++pos_;
            int inner = parse_expr(ast);
            if (inner < 0 || pos_ >= len_ || toks_[pos_] != kRParen) return -1;
            ++pos_;
            return inner;
        }
        if (t == kSin) {
            ++pos_;
            if (pos_ >= len_ || toks_[pos_] != kLParen) return -1;
            ++pos_;
            int inner = parse_expr(ast);
            if (inner < 0 || pos_ >= len_ || toks_[pos_] != kRParen) return -1;
            ++pos_;
            ast.push_back({AstNode::kSinOp, 0.0, inner, -1});
            return static_cast<int>(ast.size()) - 1;
        }
        return -1;
    }

    const SequenceX& toks_;
    std::size_t len_;
    std::size_t pos_ = 0;
};

double eval_ast(const std::vector<AstNode>& ast, int idx, double x) {
    const AstNode& n = ast[static_cast<std::size_t>(idx)];
    switch (n.kind) {
        case AstNode::kConst: return n.cval;
        case AstNode::kVar: return x;
        case AstNode::kAdd: return eval_ast(ast, n.a, x) + eval_ast(ast, n.b, x);
        case AstNode::kMul: return eval_ast(ast, n.a, x) * eval_ast(ast, n.b, x);
        case AstNode::kDiv: return eval_ast(ast, n.a, x) / eval_ast(ast, n.b, x);
        case AstNode::kSinOp: return std::sin(eval_ast(ast, n.a, x));
    }
    return 0.0;
}

// Parses the sequence (pads must be trailing). Returns root index into ast,
// or -1 on any malformation.
int parse_arith(const SequenceX& toks, std::vector<AstNode>& ast) {
    std::size_t len = toks.size();
    while (len > 0 && toks[len - 1] == kPad) --len;
    if (len == 0) return -1;
    for (std::size_t i = 0; i < len; ++i)
        if (toks[i] == kPad) return -1;  // interior pad
    ArithParser p(toks, len);
    int root = p.parse_expr(ast);
    if (root < 0 || p.pos() != len) return -1;
    return root;
}

double arith_target(double x) { return 1.0 / 3.0 + x + std::sin(x * x); }

double arith_score(const SequenceX& toks) {
    for (std::size_t t : toks)
        if (t >= 11) throw std::invalid_argument("arith oracle: token index out of vocab");
    std::vector<AstNode> ast;
    const int root = parse_arith(toks, ast);
    if (root < 0) return kArithPenalty;
    double sse = 0.0;
    for (int i = 0; i <= 40; ++i) {
        const double x = -2.0 + 0.1 * i;
        const double v = eval_ast(ast, root, x);
        if (!std::isfinite(v)) return kArithPenalty;
        const double d = v - arith_target(x);
        sse += d * d;
    }
    const double mse = sse / 41.0;
    return std::log1p(mse);
}

// Grammar-guided random expression generation within a token budget; every
// generated sequence parses by construction.
void gen_factor(Rng& rng, int budget, int depth, std::vector<std::size_t>& out);

void gen_term(Rng& rng, int budget, int depth, std::vector<std::size_t>& out) {
    const auto before = out.size();
    gen_factor(rng, budget, depth, out);
    int used = static_cast<int>(out.size() - before);
    while (budget - used >= 2 && rng.uniform() < 0.35) {
        out.push_back(rng.uniform() < 0.7 ? kStar : kSlash);
        gen_factor(rng, budget - used - 1, depth, out);
        used = static_cast<int>(out.size() - before);
    }
}

void gen_expr(Rng& rng, int budget, int depth, std::vector<std::size_t>& out) {
    const auto before = out.size();
    gen_term(rng, budget, depth, out);
    int used = static_cast<int>(out.size() - before);
    while (budget - used >= 2 && rng.uniform() < 0.4) {
        out.push_back(kPlus);
        gen_term(rng, budget - used - 1, depth, out);
        used = static_cast<int>(out.size() - before);
    }
}

void gen_factor(Rng& rng, int budget, int depth, std::vector<std::size_t>& out) {
    const double roll = rng.uniform();
    if (budget >= 4 && depth < 3 && roll < 0.2) {
        out.push_back(kSin);
        out.push_back(kLParen);
        gen_expr(rng, budget - 3, depth + 1, out);
        out.push_back(kRParen);
        return;
    }
    if (budget >= 3 && depth < 3 && roll < 0.3) {
        out.push_back(kLParen);
        gen_expr(rng, budget - 2, depth + 1, out);
        out.push_back(kRParen);
        return;
    }
    static constexpr std::size_t atoms[] = {kVarX, kOne, kTwo, kThree};
    out.push_back(atoms[rng.index(4)]);
}

std::vector<SequenceX> arith_corpus(std::size_t size, Rng& rng) {
    std::set<SequenceX> seen;
    std::vector<SequenceX> result;
    std::size_t attempts = 0;
    while (result.size() < size && attempts < size * 200 + 1000) {
        ++attempts;
        std::vector<std::size_t> toks;
        gen_expr(rng, static_cast<int>(kArithT), 0, toks);
        if (toks.size() > kArithT) continue;
        toks.resize(kArithT, kPad);
        if (seen.insert(toks).second) result.push_back(toks);
    }
    return result;
}

constexpr std::size_t kBitsT = 20;

double bitstring_score(const SequenceX& toks, const std::vector<int>& primary,
                       const std::vector<int>& secondary) {
    if (toks.size() != kBitsT)
        throw std::invalid_argument("bitstring oracle: wrong sequence length");
    int d1 = 0, d2 = 0;
    for (std::size_t i = 0; i < kBitsT; ++i) {
        if (toks[i] >= 2) throw std::invalid_argument("bitstring oracle: token index out of vocab");
        const int b = static_cast<int>(toks[i]);
        d1 += b == primary[i] ? 0 : 1;
        d2 += b == secondary[i] ? 0 : 1;
    }
    return std::exp(-d1 / 5.0) + 0.3 * std::exp(-d2 / 3.0);
}

std::vector<SequenceX> bitstring_corpus(std::size_t size, Rng& rng) {
    std::set<SequenceX> seen;
    std::vector<SequenceX> result;
    std::size_t attempts = 0;
    while (result.size() < size && attempts < size * 200 + 1000) {
        ++attempts;
        SequenceX toks(kBitsT);
        for (auto& t : toks) t = rng.index(2);
        if (seen.insert(toks).second) result.push_back(toks);
    }
    return result;
}

}  // namespace

bool arith_eval(const SequenceX& x, double at, double* out) {
    std::vector<AstNode> ast;
    const int root = parse_arith(x, ast);
    if (root < 0) return false;
    *out = eval_ast(ast, root, at);
    return true;
}

void bitstring_patterns(std::uint64_t task_seed, std::vector<int>& primary,
                        std::vector<int>& secondary) {
    Rng rng(task_seed);
    primary.assign(kBitsT, 0);
    for (auto& b : primary) b = static_cast<int>(rng.index(2));
    // secondary bump: primary with exactly 9 positions flipped, far enough
    // apart that the primary bump stays the global maximum
    std::vector<std::size_t> order(kBitsT);
    for (std::size_t i = 0; i < kBitsT; ++i) order[i] = i;
    rng.shuffle(order);
    secondary = primary;
    for (std::size_t i = 0; i < 9; ++i) secondary[order[i]] = 1 - secondary[order[i]];
}

Task make_arith_task() {
    Task t;
    t.id = "arith";
    t.vocab.tokens = {"<pad>", "x", "+", "*", "sin", "1", "2", "3", "/", "(", ")"};
    t.vocab.pad_index = 0;
    t.T = kArithT;
    t.maximize = false;
    t.oracle = [](const SequenceX& x) { return arith_score(x); };
    t.corpus = [](std::size_t size, Rng& rng) { return arith_corpus(size, rng); };
    return t;
}

Task make_bitstring_task(std::uint64_t task_seed) {
    Task t;
    t.id = "bitstring";
    t.vocab.tokens = {"0", "1"};
    t.vocab.pad_index = 0;
    t.T = kBitsT;
    t.maximize = true;
    std::vector<int> primary, secondary;
    bitstring_patterns(task_seed, primary, secondary);
    t.oracle = [primary, secondary](const SequenceX& x) {
        return bitstring_score(x, primary, secondary);
    };
    t.corpus = [](std::size_t size, Rng& rng) { return bitstring_corpus(size, rng); };
    return t;
}

Task make_task(const std::string& id, std::uint64_t task_seed) {
    if (id == "arith") return make_arith_task();
    if (id == "bitstring") return make_bitstring_task(task_seed);
    throw std::invalid_argument("unknown task id: " + id);
}

}  // namespace cobo
