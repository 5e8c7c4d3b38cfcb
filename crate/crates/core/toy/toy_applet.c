/*
 * Toy interpreter-like applet used as a deterministic crash target.
 *
 * Reads a script from the file named by argv[1] (or stdin when no argument
 * is given) and scans it left to right for command tokens:
 *
 *   BOOM      null pointer write                        (bug in A and B)
 *   NEST(((   recursion, one level per '(' that follows  (bug in A, bounded in B)
 *   ABRT      assertion failure via abort()             (bug in A, fixed in B)
 *   LOOP      spins forever                             (both variants)
 *
 * Anything else is ignored and the program exits 0. Build with
 * -DTOY_VARIANT_B for the patched variant.
 */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/resource.h>

#define MAX_INPUT (1 << 20)
#define FRAME_PAD 4096
#define NEST_LIMIT 64

static char script[MAX_INPUT];
static size_t script_len;

__attribute__((noinline)) static void handle_boom(int *slot)
{
	*(volatile int *)slot = 0x42;
}

__attribute__((noinline)) static int nest_group(size_t pos, int depth)
{
	volatile char pad[FRAME_PAD];
	pad[0] = (char)depth;
	pad[FRAME_PAD - 1] = (char)pos;
#ifdef TOY_VARIANT_B
	if (depth >= NEST_LIMIT)
		return -1;
#endif
	if (pos < script_len && script[pos] == '(')
		return nest_group(pos + 1, depth + 1) + pad[0] - pad[0];
	return depth;
}

__attribute__((noinline)) static void handle_abrt(size_t pos)
{
#ifndef TOY_VARIANT_B
	fprintf(stderr, "toy: unexpected ABRT at offset %zu\n", pos);
	abort();
#else
	(void)pos;
#endif
}

__attribute__((noinline)) static void handle_loop(void)
{
	volatile unsigned long spin = 0;
	for (;;)
		spin++;
}

static int starts_with(size_t pos, const char *tok)
{
	size_t n = strlen(tok);
	return pos + n <= script_len && memcmp(script + pos, tok, n) == 0;
}

static int run_script(void)
{
	size_t pos = 0;
	while (pos < script_len) {
		if (starts_with(pos, "BOOM")) {
			handle_boom(NULL);
			pos += 4;
		} else if (starts_with(pos, "NEST")) {
			int depth = nest_group(pos + 4, 0);
			if (depth < 0) {
				fprintf(stderr, "toy: nesting too deep\n");
				return 1;
			}
			pos += 4 + (size_t)depth;
		} else if (starts_with(pos, "ABRT")) {
			handle_abrt(pos);
			pos += 4;
		} else if (starts_with(pos, "LOOP")) {
			handle_loop();
		} else {
			pos++;
		}
	}
	return 0;
}

int main(int argc, char **argv)
{
	struct rlimit rl;
	if (getrlimit(RLIMIT_STACK, &rl) == 0 &&
	    (rl.rlim_cur == RLIM_INFINITY || rl.rlim_cur > 8u << 20)) {
		rl.rlim_cur = 8u << 20;
		setrlimit(RLIMIT_STACK, &rl);
	}

	FILE *in = stdin;
	if (argc > 1) {
		in = fopen(argv[1], "rb");
		if (!in) {
			perror(argv[1]);
			return 2;
		}
	}
	script_len = fread(script, 1, sizeof(script), in);
	if (in != stdin)
		fclose(in);
	return run_script();
}
